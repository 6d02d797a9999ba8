"""Synthetic stand-in for a human-centric video corpus plus a paired
text-motion dataset.

Every item draws an action class and an object category. The action class
drives the predicate words of its text, the keypoint dynamics of its video,
part of its frame features and its 3D motion; the object drives the argument
word and the rest of the frame features. A fraction of items is
"action-only": the text names no object and the frame features are pure
noise, so only the keypoint channel carries signal.

Only the first ``video_class_coverage`` share of action classes appears in
the video database, so queries of the other classes can only retrieve a
video whose action disagrees with their text.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..codec import MotionFeatureSequence
from ..encoders import FrameFeatureSequence, KeypointSequence, Vocabulary, load_tensors, save_tensors
from ..fusion import RetrievalSample
from ..numerics import substream

FILLERS = ("a", "the", "person", "someone", "slowly", "quickly", "then", "again")


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    n_classes: int = 8
    samples_per_class: int = 100
    n_objects: int = 6
    n_joints: int = 17
    motion_dim: int = 12
    video_frames: int = 8
    motion_frames: int = 24
    frame_dim: int = 32
    noise: float = 0.3
    mixing_ratio: float = 0.5
    action_only_fraction: float = 0.4
    video_fraction: float = 0.5
    test_fraction: float = 0.2
    video_class_coverage: float = 0.75
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "samples_per_class", "n_objects", "n_joints", "motion_dim",
                     "video_frames", "motion_frames", "frame_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("mixing_ratio", "action_only_fraction", "video_fraction", "test_fraction",
                     "video_class_coverage"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.covered_classes < 1:
            raise ValueError("video_class_coverage leaves no class with videos")

    @property
    def covered_classes(self) -> int:
        return int(round(self.video_class_coverage * self.n_classes))


@dataclass
class Item:
    label: int
    obj: int
    action_only: bool
    text: str
    keypoints: np.ndarray   # (video_frames, joints, 2)
    frames: np.ndarray      # (video_frames, frame_dim)
    motion: np.ndarray      # (motion_frames, motion_dim)


@dataclass
class Corpus:
    """In-memory corpus; ids are ``t*``/``v*`` for captioned videos and
    ``q*``/``m*`` for the text-motion dataset."""
    config: SyntheticCorpusConfig
    vocab: Vocabulary
    captions: dict[str, str] = field(default_factory=dict)
    videos_kp: dict[str, np.ndarray] = field(default_factory=dict)
    videos_fr: dict[str, np.ndarray] = field(default_factory=dict)
    pairs: list[tuple[str, str, str]] = field(default_factory=list)   # text_id, video_id, split
    queries: list[tuple[str, str, str, str]] = field(default_factory=list)  # qid, motion_id, split, text
    motions: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, tuple[int, int, bool]] = field(default_factory=dict)

    @property
    def video_ids(self) -> list[str]:
        return sorted(self.videos_kp)

    def retrieval_samples(self, split: str) -> list[RetrievalSample]:
        out = []
        for tid, vid, sp in self.pairs:
            if sp != split:
                continue
            out.append(RetrievalSample(self.vocab.tokenize(self.captions[tid]),
                                       KeypointSequence(self.videos_kp[vid]),
                                       FrameFeatureSequence(self.videos_fr[vid]), tid, vid))
        return out

    def query_split(self, split: str) -> list[tuple[str, str, str]]:
        return [(q, m, text) for q, m, sp, text in self.queries if sp == split]

    def motion(self, motion_id: str) -> MotionFeatureSequence:
        return MotionFeatureSequence(self.motions[motion_id])

    # -- files ----------------------------------------------------------------

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        j = lambda name: os.path.join(out_dir, name)  # noqa: E731
        self.vocab.save(j("vocab.txt"))
        with open(j("captions.tsv"), "w", encoding="utf-8") as fh:
            fh.writelines(f"{k}\t{v}\n" for k, v in self.captions.items())
        with open(j("pairs.tsv"), "w", encoding="utf-8") as fh:
            fh.writelines(f"{t}\t{v}\t{s}\n" for t, v, s in self.pairs)
        with open(j("queries.tsv"), "w", encoding="utf-8") as fh:
            fh.writelines(f"{q}\t{m}\t{s}\t{t}\n" for q, m, s, t in self.queries)
        with open(j("meta.tsv"), "w", encoding="utf-8") as fh:
            fh.writelines(f"{k}\t{a}\t{o}\t{int(f)}\n" for k, (a, o, f) in self.meta.items())
        save_tensors(j("videos_keypoints.tensors"), self.videos_kp)
        save_tensors(j("videos_frames.tensors"), self.videos_fr)
        save_tensors(j("motions.tensors"), self.motions)
        with open(j("corpus.cfg"), "w", encoding="utf-8") as fh:
            for k, v in self.config.__dict__.items():
                fh.write(f"{k} = {v}\n")

    @classmethod
    def read(cls, in_dir, with_ground_truth: bool = True) -> "Corpus":
        """Load a corpus directory. With ``with_ground_truth=False`` the
        caption/video pairing and labels are never opened."""
        from .config import read_config
        j = lambda name: os.path.join(in_dir, name)  # noqa: E731
        cfg = read_config(j("corpus.cfg"), SyntheticCorpusConfig)
        corpus = cls(cfg, Vocabulary.load(j("vocab.txt")))
        with open(j("captions.tsv"), encoding="utf-8") as fh:
            for line in fh:
                k, v = line.rstrip("\n").split("\t")
                corpus.captions[k] = v
        with open(j("queries.tsv"), encoding="utf-8") as fh:
            corpus.queries = [tuple(line.rstrip("\n").split("\t")) for line in fh]
        corpus.videos_kp = load_tensors(j("videos_keypoints.tensors"))
        corpus.videos_fr = load_tensors(j("videos_frames.tensors"))
        corpus.motions = load_tensors(j("motions.tensors"))
        if with_ground_truth:
            with open(j("pairs.tsv"), encoding="utf-8") as fh:
                corpus.pairs = [tuple(line.rstrip("\n").split("\t")) for line in fh]
            with open(j("meta.tsv"), encoding="utf-8") as fh:
                for line in fh:
                    k, a, o, f = line.rstrip("\n").split("\t")
                    corpus.meta[k] = (int(a), int(o), bool(int(f)))
        return corpus


def _vocabulary(cfg: SyntheticCorpusConfig) -> Vocabulary:
    words = list(FILLERS)
    for c in range(cfg.n_classes):
        words += [f"act{c}a", f"act{c}b"]
    words += [f"obj{o}" for o in range(cfg.n_objects)]
    return Vocabulary(words)


class _Prototypes:
    def __init__(self, cfg: SyntheticCorpusConfig):
        rng = substream(cfg.seed, "prototypes")
        c, j = cfg.n_classes, cfg.n_joints
        self.base_pose = rng.uniform(-0.45, 0.45, size=(j, 2))
        self.kp_amp = rng.uniform(0.1, 0.35, size=(c, j, 2))
        self.kp_freq = rng.choice([0.5, 1.0, 1.5, 2.0], size=c)
        self.kp_phase = rng.uniform(0, 2 * np.pi, size=(c, j, 2))
        self.obj_frame = rng.normal(0.0, 1.0, size=(cfg.n_objects, cfg.frame_dim))
        self.act_frame = rng.normal(0.0, 1.0, size=(c, cfg.frame_dim))
        self.mot_mean = rng.normal(0.0, 1.0, size=(c, cfg.motion_dim))
        self.mot_amp = rng.uniform(0.5, 1.5, size=(c, cfg.motion_dim))
        self.mot_freq = rng.choice([1.0, 2.0], size=c)
        self.mot_phase = rng.uniform(0, 2 * np.pi, size=(c, cfg.motion_dim))


def _make_item(cfg, proto, rng, label, obj, action_only) -> Item:
    m, t_m = cfg.video_frames, cfg.motion_frames
    words = [str(rng.choice(FILLERS[:4])), f"act{label}{'ab'[rng.integers(2)]}"]
    if not action_only:
        words += [str(rng.choice(["the", "a"])), f"obj{obj}"]
    words.append(str(rng.choice(FILLERS[4:])))
    text = " ".join(words)

    amp = 1.0 if action_only else cfg.mixing_ratio
    t = np.arange(m)[:, None, None]
    shift = rng.uniform(-0.3, 0.3)
    kp = (proto.base_pose[None] + amp * proto.kp_amp[label][None]
          * np.sin(2 * np.pi * proto.kp_freq[label] * t / m + proto.kp_phase[label][None] + shift)
          + 0.1 * cfg.noise * rng.normal(size=(m, cfg.n_joints, 2)))
    kp = np.clip(kp, -1.0, 1.0)

    if action_only:
        frames = rng.normal(0.0, 1.0, size=(m, cfg.frame_dim))
    else:
        frames = (proto.obj_frame[obj] + (1.0 - cfg.mixing_ratio) * proto.act_frame[label]
                  + cfg.noise * rng.normal(size=(m, cfg.frame_dim)))

    tt = np.arange(t_m)[:, None]
    motion = (proto.mot_mean[label] + proto.mot_amp[label]
              * np.sin(2 * np.pi * proto.mot_freq[label] * tt / t_m + proto.mot_phase[label] + shift)
              + 0.2 * rng.normal(size=cfg.motion_dim) + cfg.noise * rng.normal(size=(t_m, cfg.motion_dim)))
    return Item(label, obj, action_only, text, kp, frames, motion)


def gen_synthetic(cfg: SyntheticCorpusConfig) -> Corpus:
    proto = _Prototypes(cfg)
    rng = substream(cfg.seed, "data")
    split_rng = substream(cfg.seed, "pairing")
    corpus = Corpus(cfg, _vocabulary(cfg))
    n = cfg.n_classes * cfg.samples_per_class
    n_video = int(round(cfg.video_fraction * n))
    video_labels = np.arange(n_video) % cfg.covered_classes
    query_labels = np.arange(n - n_video) % cfg.n_classes
    labels = np.concatenate([split_rng.permutation(video_labels), split_rng.permutation(query_labels)])
    vi = qi = 0
    for pos in range(n):
        label = int(labels[pos])
        obj = int(rng.integers(cfg.n_objects))
        action_only = bool(rng.random() < cfg.action_only_fraction)
        item = _make_item(cfg, proto, rng, label, obj, action_only)
        is_video = pos < n_video
        span = n_video if is_video else n - n_video
        local = pos if is_video else pos - n_video
        split = "test" if local >= span - int(round(cfg.test_fraction * span)) else "train"
        if is_video:
            tid, vid = f"t{vi:05d}", f"v{vi:05d}"
            vi += 1
            corpus.captions[tid] = item.text
            corpus.videos_kp[vid] = item.keypoints
            corpus.videos_fr[vid] = item.frames
            corpus.pairs.append((tid, vid, split))
            corpus.meta[vid] = (label, obj, action_only)
        else:
            qid, mid = f"q{qi:05d}", f"m{qi:05d}"
            qi += 1
            corpus.queries.append((qid, mid, split, item.text))
            corpus.motions[mid] = item.motion
            corpus.meta[qid] = (label, obj, action_only)
    return corpus
