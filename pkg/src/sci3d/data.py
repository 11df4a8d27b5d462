"""Synthetic mini-CATER videos: generation, labels, sampling, and disk io.

A scene is a handful of colored shapes on a dark canvas. Objects perform
timed motions (slide, pick_place, rotate, flip) and every video carries two
label vectors: atomic actions, which are (shape, motion) pairs, and composite
actions, which are ordered pairs of atomic actions joined by a temporal
relation (before / during / after). Both are multi-hot and rederivable from
the event list, so the labels can never drift from the data.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .scene import (
    MAX_OBJECTS,
    SHAPES,
    COLORS,
    MATERIALS,
    STATE_DIM,
    make_state,
    render_frame,
)

MOTIONS = ("slide", "pick_place", "rotate", "flip")
RELATIONS = ("before", "during", "after")

# rotating a circle is invisible and a squashed circle reads like a
# pick_place shrink; restrict motions to shapes where they stay distinct
_MOTION_SHAPES = {
    "slide": frozenset(SHAPES),
    "pick_place": frozenset(SHAPES),
    "rotate": frozenset(("triangle", "square")),
    "flip": frozenset(("triangle", "square")),
}

_RADII = (6.5, 10.0)  # small, large


class DataError(Exception):
    """Raised for invalid scene specs, infeasible generation, or corrupt datasets."""


@dataclass(frozen=True)
class SceneSpec:
    """Scene and label-space parameters for one dataset."""

    canvas: tuple = (64, 64)
    video_len: int = 96
    atomic_len: int = 16
    num_objects_min: int = 2
    num_objects_max: int = 4
    max_objects: int = MAX_OBJECTS
    events_min: int = 2
    events_max: int = 4
    motions: tuple = ("slide", "pick_place", "rotate")
    motion_classes_only: bool = False

    def validate(self):
        if len(self.canvas) != 2 or min(self.canvas) < 32:
            raise DataError(f"canvas must be at least 32x32, got {self.canvas}")
        if self.num_objects_min < 1:
            raise DataError("num_objects_min must be at least 1")
        if self.num_objects_min > self.num_objects_max:
            raise DataError("num_objects_min exceeds num_objects_max")
        if self.num_objects_max > self.max_objects:
            raise DataError(
                f"num_objects_max {self.num_objects_max} exceeds "
                f"max_objects {self.max_objects}"
            )
        if self.atomic_len < 4:
            raise DataError("atomic_len must be at least 4")
        if self.video_len < self.atomic_len:
            raise DataError("video_len must be at least atomic_len")
        if not self.motions or any(m not in MOTIONS for m in self.motions):
            raise DataError(f"motions must be a non-empty subset of {MOTIONS}")
        if not 1 <= self.events_min <= self.events_max:
            raise DataError("need 1 <= events_min <= events_max")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["canvas"] = tuple(d["canvas"])
        d["motions"] = tuple(d["motions"])
        d.setdefault("motion_classes_only", False)
        return cls(**d)

    @property
    def label_space(self):
        return LabelSpace(
            motions=self.motions, motion_only=self.motion_classes_only
        )


@dataclass(frozen=True)
class LabelSpace:
    """Index arithmetic for atomic and composite label vectors.

    Atomic classes enumerate (shape, motion) pairs, shape-major, unless
    motion_only collapses the shape axis away. Composite classes enumerate
    (atomic a, relation, atomic b) triples with id a * 3A + r * A + b. The
    composite space includes pairs that a given dataset never realizes;
    evaluation skips classes without positives.
    """

    motions: tuple
    motion_only: bool = False

    @property
    def num_atomic(self):
        if self.motion_only:
            return len(self.motions)
        return len(SHAPES) * len(self.motions)

    @property
    def num_composite(self):
        return self.num_atomic * len(RELATIONS) * self.num_atomic

    def atomic_index(self, shape_idx, motion):
        if motion not in self.motions:
            raise ValueError(f"unknown motion {motion!r}")
        m = self.motions.index(motion)
        if self.motion_only:
            return m
        return int(shape_idx) * len(self.motions) + m

    def atomic_name(self, idx):
        if self.motion_only:
            return self.motions[int(idx)]
        s, m = divmod(int(idx), len(self.motions))
        return f"{SHAPES[s]}_{self.motions[m]}"

    def composite_index(self, a, relation, b):
        n = self.num_atomic
        return int(a) * len(RELATIONS) * n + RELATIONS.index(relation) * n + int(b)

    def composite_name(self, idx):
        n = self.num_atomic
        a, rest = divmod(int(idx), len(RELATIONS) * n)
        r, b = divmod(rest, n)
        return f"{self.atomic_name(a)}__{RELATIONS[r]}__{self.atomic_name(b)}"


@dataclass(frozen=True)
class ActionEvent:
    """One motion performed by one object over an inclusive frame interval."""

    object_id: int
    motion: str
    start: int
    end: int

    @property
    def interval(self):
        return (self.start, self.end)


@dataclass(frozen=True)
class SceneObject:
    shape: int
    color: int
    material: int
    size_class: int
    radius: float
    x: float
    y: float


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # (T, H, W, 3) uint8
    states: np.ndarray  # (T, max_objects, STATE_DIM) float32, or None if stripped
    events: tuple
    objects: tuple
    atomic: np.ndarray  # (num_atomic,) float32 multi-hot
    composite: np.ndarray  # (num_composite,) float32 multi-hot
    spec: SceneSpec
    seed: int


def temporal_relation(a, b):
    """Classify interval a against interval b.

    Intervals are inclusive (start, end) frame pairs. Returns "before" when a
    ends strictly before b starts, "after" when a starts strictly after b
    ends, "during" when a is contained in b without being identical to it,
    and "other" for every remaining arrangement (overlap, identity).
    """
    a = _check_interval(a, "a")
    b = _check_interval(b, "b")
    if a[1] < b[0]:
        return "before"
    if a[0] > b[1]:
        return "after"
    if b[0] <= a[0] and a[1] <= b[1] and a != b:
        return "during"
    return "other"


def _check_interval(iv, name):
    try:
        s, e = int(iv[0]), int(iv[1])
    except (TypeError, ValueError, IndexError):
        raise ValueError(f"interval {name} must be a (start, end) pair, got {iv!r}")
    if s < 0 or e < s:
        raise ValueError(f"interval {name} must satisfy 0 <= start <= end, got {iv!r}")
    return (s, e)


def atomic_labels(events, object_shapes, space):
    """Multi-hot atomic label vector for an event list."""
    vec = np.zeros(space.num_atomic, dtype=np.float32)
    for ev in events:
        vec[space.atomic_index(object_shapes[ev.object_id], ev.motion)] = 1.0
    return vec


def composite_labels(events, object_shapes, space):
    """Multi-hot composite label vector over all ordered event pairs.

    Pairs whose relation is "other" contribute nothing.
    """
    vec = np.zeros(space.num_composite, dtype=np.float32)
    for i, ei in enumerate(events):
        for j, ej in enumerate(events):
            if i == j:
                continue
            rel = temporal_relation(ei.interval, ej.interval)
            if rel == "other":
                continue
            a = space.atomic_index(object_shapes[ei.object_id], ei.motion)
            b = space.atomic_index(object_shapes[ej.object_id], ej.motion)
            vec[space.composite_index(a, rel, b)] = 1.0
    return vec


def _motion_visible(motion, shape_idx):
    return SHAPES[shape_idx] in _MOTION_SHAPES[motion]


def _place_objects(rng, spec):
    h, w = spec.canvas
    n = int(rng.integers(spec.num_objects_min, spec.num_objects_max + 1))
    objects = []
    for _ in range(n):
        for _attempt in range(200):
            shape = int(rng.integers(len(SHAPES)))
            color = int(rng.integers(len(COLORS)))
            material = int(rng.integers(len(MATERIALS)))
            size_class = int(rng.integers(2))
            radius = _RADII[size_class]
            margin = radius + 1.5
            if margin >= w - 1 - margin or margin >= h - 1 - margin:
                raise DataError("canvas too small for object radius")
            x = float(rng.uniform(margin, w - 1 - margin))
            y = float(rng.uniform(margin, h - 1 - margin))
            if all(
                np.hypot(x - o.x, y - o.y) >= radius + o.radius + 2.0 for o in objects
            ):
                objects.append(
                    SceneObject(shape, color, material, size_class, radius, x, y)
                )
                break
        else:
            raise DataError(
                f"could not place {n} objects on a {h}x{w} canvas; spec infeasible"
            )
    return objects


def _sample_events(rng, spec, objects):
    T = spec.video_len
    n_target = int(rng.integers(spec.events_min, spec.events_max + 1))
    lmin = max(4, spec.atomic_len // 2)
    lmax = spec.atomic_len
    # keep at most two motions in flight at any frame so scenes stay readable
    coverage = np.zeros(T, dtype=np.int64)
    events = []
    want_nested = n_target >= 2 and lmax > lmin and rng.random() < 0.5

    def slot_free(obj, s, e):
        return all(
            ev.object_id != obj or ev.end < s or ev.start > e for ev in events
        )

    attempts = 0
    while len(events) < n_target and attempts < 800:
        attempts += 1
        nesting = want_nested and len(events) == 1
        if want_nested and len(events) == 0:
            length = lmax
        elif nesting:
            length = int(rng.integers(lmin, lmax))  # strictly inside the outer one
        else:
            length = int(rng.integers(lmin, lmax + 1))
        if nesting:
            lo, hi = events[0].start, events[0].end - length + 1
        else:
            lo, hi = 0, T - length
        if hi < lo:
            continue
        start = int(rng.integers(lo, hi + 1))
        end = start + length - 1
        if coverage[start : end + 1].max() >= 2:
            continue
        motion = str(rng.choice(spec.motions))
        candidates = [
            i
            for i, ob in enumerate(objects)
            if _motion_visible(motion, ob.shape) and slot_free(i, start, end)
        ]
        if not candidates:
            continue
        obj = int(rng.choice(candidates))
        events.append(ActionEvent(object_id=obj, motion=motion, start=start, end=end))
        coverage[start : end + 1] += 1

    if len(events) < spec.events_min:
        raise DataError(
            "could not schedule events; motions may be incompatible with the "
            "sampled objects (spec infeasible)"
        )
    return tuple(sorted(events, key=lambda ev: (ev.start, ev.end, ev.object_id)))


def _ease(u):
    return u * u * (3.0 - 2.0 * u)


def _pick_place_profile(u):
    # shrink toward the midpoint, grow back out: reads as lift-carry-drop
    return np.clip(np.abs(2.0 * u - 1.0), 0.15, 1.0)


def _sample_target(rng, spec, radius, src):
    h, w = spec.canvas
    margin = radius + 1.5
    min_hop = 0.3 * min(h, w)
    for _ in range(100):
        tx = float(rng.uniform(margin, w - 1 - margin))
        ty = float(rng.uniform(margin, h - 1 - margin))
        if np.hypot(tx - src[0], ty - src[1]) >= min_hop:
            return np.array([tx, ty], dtype=np.float32)
    return np.array(
        [float(rng.uniform(margin, w - 1 - margin)), float(rng.uniform(margin, h - 1 - margin))],
        dtype=np.float32,
    )


def _build_trajectories(rng, spec, objects, events):
    T = spec.video_len
    n = len(objects)
    pos = np.zeros((T, n, 2), dtype=np.float32)
    rad = np.zeros((T, n), dtype=np.float32)
    ang = np.zeros((T, n), dtype=np.float32)
    xsc = np.ones((T, n), dtype=np.float32)
    for i, ob in enumerate(objects):
        pos[:, i] = (ob.x, ob.y)
        rad[:, i] = ob.radius
    for ev in events:  # sorted by start, so later motions see earlier displacements
        i = ev.object_id
        t0, t1 = ev.start, ev.end
        u = np.linspace(0.0, 1.0, t1 - t0 + 1, dtype=np.float32)
        if ev.motion in ("slide", "pick_place"):
            src = pos[t0, i].copy()
            dst = _sample_target(rng, spec, objects[i].radius, src)
            seg = src[None, :] + (dst - src)[None, :] * _ease(u)[:, None]
            pos[t0 : t1 + 1, i] = seg
            pos[t1 + 1 :, i] = dst
            if ev.motion == "pick_place":
                rad[t0 : t1 + 1, i] = objects[i].radius * _pick_place_profile(u)
        elif ev.motion == "rotate":
            ang[t0 : t1 + 1, i] = (2.0 * np.pi / 3.0) * np.sin(np.pi * u)
        elif ev.motion == "flip":
            xsc[t0 : t1 + 1, i] = np.cos(2.0 * np.pi * u)
    return pos, rad, ang, xsc


def generate_scene(seed, spec=None):
    """Generate one synthetic video deterministically from a seed.

    The same (seed, spec) pair always yields bit-identical frames, states,
    events, and labels.
    """
    spec = spec if spec is not None else SceneSpec()
    spec.validate()
    rng = np.random.default_rng(int(seed))
    objects = _place_objects(rng, spec)
    events = _sample_events(rng, spec, objects)
    pos, rad, ang, xsc = _build_trajectories(rng, spec, objects, events)

    h, w = spec.canvas
    T = spec.video_len
    n = len(objects)
    states = np.zeros((T, spec.max_objects, STATE_DIM), dtype=np.float32)
    frames = np.zeros((T, h, w, 3), dtype=np.uint8)
    for t in range(T):
        for i, ob in enumerate(objects):
            states[t, i] = make_state(
                pos[t, i, 0] / w,
                pos[t, i, 1] / h,
                ob.shape,
                ob.color,
                rad[t, i],
                ob.material,
            )
        frames[t] = render_frame(
            states[t, :n], spec.canvas, angles=ang[t], xscales=xsc[t]
        )

    shapes = [ob.shape for ob in objects]
    space = spec.label_space
    return SyntheticVideo(
        frames=frames,
        states=states,
        events=events,
        objects=tuple(objects),
        atomic=atomic_labels(events, shapes, space),
        composite=composite_labels(events, shapes, space),
        spec=spec,
        seed=int(seed),
    )


def sample_clip(video, clip_len, augment=False, rng=None):
    """Cut a clip of clip_len frames, normalized to float32 in [0, 1].

    augment=False takes the centered window with no other processing, so the
    eval path is a pure function of the video. augment=True takes a random
    temporal window plus a random scale-and-crop spatial jitter driven
    entirely by the supplied numpy Generator.
    """
    frames = video.frames if isinstance(video, SyntheticVideo) else np.asarray(video)
    T, h, w = frames.shape[0], frames.shape[1], frames.shape[2]
    clip_len = int(clip_len)
    if clip_len < 1 or clip_len > T:
        raise DataError(f"clip_len {clip_len} invalid for video of {T} frames")
    if augment and rng is None:
        raise DataError("augment=True requires an rng")

    t0 = int(rng.integers(0, T - clip_len + 1)) if augment else (T - clip_len) // 2
    clip = frames[t0 : t0 + clip_len].astype(np.float32) / 255.0
    if not augment:
        return clip

    scale = float(rng.uniform(1.0, 1.25))
    nh, nw = round(h * scale), round(w * scale)
    t = torch.from_numpy(clip).permute(0, 3, 1, 2)
    t = F.interpolate(
        t, size=(nh, nw), mode="bilinear", align_corners=False, antialias=True
    )
    y0 = int(rng.integers(0, nh - h + 1))
    x0 = int(rng.integers(0, nw - w + 1))
    out = t[:, :, y0 : y0 + h, x0 : x0 + w].permute(0, 2, 3, 1).contiguous().numpy()
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# disk format

_ARRAY_MAGIC = b"SCV1"
_KIND_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}


def _write_array(path, arr, kind):
    dtype = _KIND_DTYPES[kind]
    arr = np.ascontiguousarray(arr, dtype=dtype)
    with open(path, "wb") as f:
        f.write(_ARRAY_MAGIC)
        f.write(struct.pack("<BBB", 1, kind, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def _read_array(path, kind):
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _ARRAY_MAGIC:
        raise DataError(f"{path}: bad magic, not a dataset array file")
    if len(blob) < 7:
        raise DataError(f"{path}: truncated header")
    version, got_kind, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != 1:
        raise DataError(f"{path}: unsupported version {version}")
    if got_kind != kind:
        raise DataError(f"{path}: unexpected array kind {got_kind}")
    shape = struct.unpack_from(f"<{ndim}I", blob, 7)
    offset = 7 + 4 * ndim
    dtype = _KIND_DTYPES[kind]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise DataError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_dataset(videos, root, splits=None):
    """Write videos to root with an index, one directory per video.

    splits is an optional parallel list of split names; everything defaults
    to "train".
    """
    root = Path(root)
    videos = list(videos)
    if splits is None:
        splits = ["train"] * len(videos)
    if len(splits) != len(videos):
        raise DataError("splits must parallel videos")
    if not videos:
        raise DataError("refusing to write an empty dataset")

    spec = videos[0].spec
    space = spec.label_space
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, (video, split) in enumerate(zip(videos, splits)):
        if video.spec != spec:
            raise DataError("all videos in a dataset must share one spec")
        vid = f"v{idx:05d}"
        vdir = root / vid
        vdir.mkdir(exist_ok=True)
        _write_array(vdir / "frames.bin", video.frames, kind=0)
        if video.states is not None:
            _write_array(vdir / "states.bin", video.states, kind=1)
        meta = {
            "seed": video.seed,
            "objects": [asdict(ob) for ob in video.objects],
            "events": [asdict(ev) for ev in video.events],
            "atomic_positives": np.flatnonzero(video.atomic).tolist(),
            "composite_positives": np.flatnonzero(video.composite).tolist(),
        }
        (vdir / "meta.json").write_text(json.dumps(meta, indent=1))
        entries.append({"id": vid, "split": split, "seed": video.seed})

    index = {
        "format": "sci3d-dataset",
        "version": 1,
        "scene_spec": spec.to_dict(),
        "label_space": {
            "motions": list(spec.motions),
            "num_atomic": space.num_atomic,
            "num_composite": space.num_composite,
        },
        "videos": entries,
    }
    (root / "index.json").write_text(json.dumps(index, indent=1))


class Dataset:
    """Read handle over a written dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        index_path = self.root / "index.json"
        if not index_path.is_file():
            raise DataError(f"{index_path}: no dataset index found")
        try:
            index = json.loads(index_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{index_path}: invalid json ({exc})")
        if index.get("format") != "sci3d-dataset":
            raise DataError(f"{index_path}: not a dataset index")
        self.spec = SceneSpec.from_dict(index["scene_spec"])
        self.label_space = self.spec.label_space
        self._entries = index["videos"]
        self._by_id = {e["id"]: e for e in self._entries}

    def __len__(self):
        return len(self._entries)

    def ids(self, split=None):
        return [
            e["id"] for e in self._entries if split is None or e["split"] == split
        ]

    def load(self, vid):
        if vid not in self._by_id:
            raise DataError(f"unknown video id {vid!r}")
        vdir = self.root / vid
        frames = _read_array(vdir / "frames.bin", kind=0)
        states_path = vdir / "states.bin"
        states = _read_array(states_path, kind=1) if states_path.is_file() else None
        try:
            meta = json.loads((vdir / "meta.json").read_text())
        except FileNotFoundError:
            raise DataError(f"{vdir}/meta.json: missing")
        objects = tuple(SceneObject(**ob) for ob in meta["objects"])
        events = tuple(ActionEvent(**ev) for ev in meta["events"])
        space = self.label_space
        atomic = np.zeros(space.num_atomic, dtype=np.float32)
        atomic[meta["atomic_positives"]] = 1.0
        composite = np.zeros(space.num_composite, dtype=np.float32)
        composite[meta["composite_positives"]] = 1.0
        return SyntheticVideo(
            frames=frames,
            states=states,
            events=events,
            objects=objects,
            atomic=atomic,
            composite=composite,
            spec=self.spec,
            seed=meta["seed"],
        )

    def videos(self, split=None):
        for vid in self.ids(split):
            yield self.load(vid)


def read_dataset(root):
    return Dataset(root)
