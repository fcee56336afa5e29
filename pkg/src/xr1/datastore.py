"""Episode persistence, dataset manifests, and the weighted multi-source
batch sampler.

Episode container (version ``v1``): an ASCII header terminated by an ``END``
line, followed by raw little-endian float32 arrays in the order declared by
the header's ``arrays=`` entry.  Frames are (T, K, H, W, 3); proprioception
and actions, present only for robot-sourced episodes, are (T, S) and (T, A)
with a boolean valid-dim mask recorded in the header.  The header carries a
CRC-32 of the payload; reads fail on any length or checksum mismatch rather
than truncating silently.

The manifest is a human-readable text file listing every episode per source
with its frame count and content hash, plus per-embodiment action/proprio
min/max normalization statistics.  Its ``content_hash`` covers everything
except the ``generated_at`` line.
"""

from __future__ import annotations

import hashlib
import io
import warnings
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import language

SCHEMA_VERSION = "v1"
EPISODE_MAGIC = "XR1EPISODE"
MANIFEST_MAGIC = "XR1MANIFEST"


class SchemaVersionError(ValueError):
    pass


class CorruptEpisodeError(ValueError):
    pass


# --------------------------------------------------------------------------
# episode container
# --------------------------------------------------------------------------

@dataclass
class Episode:
    embodiment_id: str
    source_kind: str  # robot | human
    task: str
    instruction: str
    seed: int
    frames: np.ndarray  # (T, K, H, W, 3) float32 in [0, 1]
    proprio: np.ndarray | None = None  # (T, S) float32
    proprio_mask: np.ndarray | None = None  # (S,) bool
    actions: np.ndarray | None = None  # (T, A) float32
    action_mask: np.ndarray | None = None  # (A,) bool

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def validate(self) -> None:
        if self.source_kind not in ("robot", "human"):
            raise ValueError(f"bad source_kind {self.source_kind!r}")
        if self.frames.ndim != 5 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, K, H, W, 3), got {self.frames.shape}")
        if self.frames.dtype != np.float32:
            raise ValueError("frames must be float32")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("frame values outside [0, 1]")
        has_motor = self.proprio is not None or self.actions is not None
        if self.source_kind == "human" and has_motor:
            raise ValueError("human-sourced episodes must not carry actions or proprio")
        if self.source_kind == "robot":
            for name, arr, mask in (("proprio", self.proprio, self.proprio_mask),
                                    ("actions", self.actions, self.action_mask)):
                if arr is None or mask is None:
                    raise ValueError(f"robot-sourced episodes need {name} and its mask")
                if arr.shape[0] != self.length:
                    raise ValueError(f"{name} length {arr.shape[0]} != frames {self.length}")
                if arr.dtype != np.float32:
                    raise ValueError(f"{name} must be float32")
                padded = arr[:, ~mask]
                if padded.size and np.abs(padded).max() != 0.0:
                    raise ValueError(f"{name}: masked-out columns must be zero")


def _mask_str(mask: np.ndarray) -> str:
    return ",".join("1" if m else "0" for m in mask)


def _parse_mask(raw: str) -> np.ndarray:
    return np.array([c == "1" for c in raw.split(",")], dtype=bool)


def write_episode(episode: Episode, path: str | Path) -> dict:
    """Serialize one validated episode; returns a file record (path, bytes, sha256)."""
    episode.validate()
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = [("frames", episode.frames)]
    lines = [
        f"{EPISODE_MAGIC} {SCHEMA_VERSION}",
        f"embodiment_id={episode.embodiment_id}",
        f"source_kind={episode.source_kind}",
        f"task={episode.task}",
        f"instruction={episode.instruction}",
        f"seed={episode.seed}",
        "frames_shape=" + ",".join(str(s) for s in episode.frames.shape),
    ]
    if episode.source_kind == "robot":
        lines.append("proprio_shape=" + ",".join(str(s) for s in episode.proprio.shape))
        lines.append("proprio_mask=" + _mask_str(episode.proprio_mask))
        lines.append("action_shape=" + ",".join(str(s) for s in episode.actions.shape))
        lines.append("action_mask=" + _mask_str(episode.action_mask))
        arrays += [("proprio", episode.proprio), ("actions", episode.actions)]
    lines.append("arrays=" + ",".join(name for name, _ in arrays))

    payload = io.BytesIO()
    for _, arr in arrays:
        payload.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = payload.getvalue()
    lines.append(f"payload_bytes={len(payload)}")
    lines.append(f"payload_crc32={zlib.crc32(payload) & 0xFFFFFFFF}")
    header = ("\n".join(lines) + "\nEND\n").encode("ascii")

    path.parent.mkdir(parents=True, exist_ok=True)
    blob = header + payload
    path.write_bytes(blob)
    return {
        "path": str(path),
        "bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "frames": episode.frames.shape[0],
    }


def _read_header(path: Path) -> tuple[dict, int]:
    """Parse the ASCII header; returns (fields, payload offset)."""
    with open(path, "rb") as fh:
        head = fh.read(4096)
    end = head.find(b"\nEND\n")
    if end < 0:
        raise CorruptEpisodeError(f"{path}: missing header terminator")
    text = head[:end].decode("ascii")
    lines = text.splitlines()
    magic, _, version = lines[0].partition(" ")
    if magic != EPISODE_MAGIC:
        raise CorruptEpisodeError(f"{path}: not an episode file")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: schema version {version!r} != supported {SCHEMA_VERSION!r}"
        )
    fields = {}
    for line in lines[1:]:
        key, _, value = line.partition("=")
        fields[key] = value
    return fields, end + len(b"\nEND\n")


def _array_specs(fields: dict) -> list[tuple[str, tuple[int, ...]]]:
    specs = []
    for name in fields["arrays"].split(","):
        shape = tuple(int(s) for s in fields[f"{name}_shape"].split(","))
        specs.append((name, shape))
    return specs


def read_episode(path: str | Path) -> Episode:
    """Full read with length and checksum verification."""
    path = Path(path)
    fields, offset = _read_header(path)
    specs = _array_specs(fields)
    expected = sum(int(np.prod(s)) * 4 for _, s in specs)
    declared = int(fields["payload_bytes"])
    if declared != expected:
        raise CorruptEpisodeError(f"{path}: declared payload {declared} != shapes {expected}")
    payload = path.read_bytes()[offset:]
    if len(payload) != declared:
        raise CorruptEpisodeError(
            f"{path}: payload length {len(payload)} != declared {declared}"
        )
    if (zlib.crc32(payload) & 0xFFFFFFFF) != int(fields["payload_crc32"]):
        raise CorruptEpisodeError(f"{path}: payload checksum mismatch")
    arrays = {}
    pos = 0
    for name, shape in specs:
        n = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(payload[pos:pos + n], dtype="<f4").reshape(shape).copy()
        pos += n
    episode = Episode(
        embodiment_id=fields["embodiment_id"],
        source_kind=fields["source_kind"],
        task=fields["task"],
        instruction=fields["instruction"],
        seed=int(fields["seed"]),
        frames=arrays["frames"],
        proprio=arrays.get("proprio"),
        proprio_mask=_parse_mask(fields["proprio_mask"]) if "proprio_mask" in fields else None,
        actions=arrays.get("actions"),
        action_mask=_parse_mask(fields["action_mask"]) if "action_mask" in fields else None,
    )
    episode.validate()
    return episode


class EpisodeHandle:
    """Lazy memory-mapped view over one episode file for window extraction."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.fields, self._offset = _read_header(self.path)
        self._maps: dict[str, np.memmap] = {}
        size = self.path.stat().st_size
        expected = self._offset + int(self.fields["payload_bytes"])
        if size != expected:
            raise CorruptEpisodeError(f"{self.path}: file size {size} != expected {expected}")

    @property
    def length(self) -> int:
        return int(self.fields["frames_shape"].split(",")[0])

    @property
    def source_kind(self) -> str:
        return self.fields["source_kind"]

    @property
    def embodiment_id(self) -> str:
        return self.fields["embodiment_id"]

    @property
    def instruction(self) -> str:
        return self.fields["instruction"]

    @property
    def task(self) -> str:
        return self.fields["task"]

    def mask(self, name: str) -> np.ndarray:
        return _parse_mask(self.fields[f"{name}_mask"])

    def array(self, name: str) -> np.memmap:
        if name not in self._maps:
            pos = self._offset
            for arr_name, shape in _array_specs(self.fields):
                n = int(np.prod(shape)) * 4
                if arr_name == name:
                    self._maps[name] = np.memmap(self.path, dtype="<f4", mode="r",
                                                 offset=pos, shape=shape)
                    break
                pos += n
            else:
                raise KeyError(f"{self.path} has no array {name!r}")
        return self._maps[name]

    def close(self) -> None:
        self._maps.clear()


class _HandleCache:
    """Bounded cache of open episode handles (keeps fd count low)."""

    def __init__(self, capacity: int = 256):
        self.capacity = capacity
        self._items: OrderedDict[str, EpisodeHandle] = OrderedDict()

    def get(self, path: str | Path) -> EpisodeHandle:
        key = str(path)
        if key in self._items:
            self._items.move_to_end(key)
            return self._items[key]
        handle = EpisodeHandle(path)
        self._items[key] = handle
        if len(self._items) > self.capacity:
            _, old = self._items.popitem(last=False)
            old.close()
        return handle


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

@dataclass
class SourceInfo:
    name: str
    kind: str  # robot | human
    files: list[tuple[str, int, str]] = field(default_factory=list)  # (relpath, T, sha12)

    @property
    def episodes(self) -> int:
        return len(self.files)


@dataclass
class NormStats:
    action_min: np.ndarray
    action_max: np.ndarray
    proprio_min: np.ndarray
    proprio_max: np.ndarray
    action_mask: np.ndarray
    proprio_mask: np.ndarray

    def normalize_actions(self, a: np.ndarray) -> np.ndarray:
        span = np.where(self.action_mask, np.maximum(self.action_max - self.action_min, 1e-6), 1.0)
        lo = np.where(self.action_mask, self.action_min, 0.0)
        out = (a - lo) / span * 2.0 - 1.0
        return np.where(self.action_mask, out, 0.0).astype(np.float32)

    def denormalize_actions(self, a: np.ndarray) -> np.ndarray:
        span = np.maximum(self.action_max - self.action_min, 1e-6)
        out = (np.clip(a, -1.0, 1.0) + 1.0) / 2.0 * span + self.action_min
        return np.where(self.action_mask, out, 0.0).astype(np.float32)

    def normalize_proprio(self, q: np.ndarray) -> np.ndarray:
        span = np.where(self.proprio_mask, np.maximum(self.proprio_max - self.proprio_min, 1e-6), 1.0)
        lo = np.where(self.proprio_mask, self.proprio_min, 0.0)
        out = (q - lo) / span * 2.0 - 1.0
        return np.where(self.proprio_mask, out, 0.0).astype(np.float32)

    def to_lines(self) -> list[str]:
        def fmt(arr):
            return ",".join(repr(float(v)) for v in arr)
        return [
            "action_min=" + fmt(self.action_min),
            "action_max=" + fmt(self.action_max),
            "proprio_min=" + fmt(self.proprio_min),
            "proprio_max=" + fmt(self.proprio_max),
            "action_mask=" + _mask_str(self.action_mask),
            "proprio_mask=" + _mask_str(self.proprio_mask),
        ]

    @classmethod
    def from_fields(cls, fields: dict) -> "NormStats":
        def arr(key):
            return np.array([float(v) for v in fields[key].split(",")], dtype=np.float64)
        return cls(arr("action_min"), arr("action_max"), arr("proprio_min"),
                   arr("proprio_max"), _parse_mask(fields["action_mask"]),
                   _parse_mask(fields["proprio_mask"]))


@dataclass
class Manifest:
    root: Path
    image_size: int
    views: int
    master_seed: int
    sources: dict[str, SourceInfo]
    stats: dict[str, NormStats]  # keyed by embodiment id
    generated_at: str = ""

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self._canonical_lines()).encode()).hexdigest()[:16]

    def _canonical_lines(self) -> list[str]:
        lines = [
            f"{MANIFEST_MAGIC} {SCHEMA_VERSION}",
            f"image_size={self.image_size}",
            f"views={self.views}",
            f"master_seed={self.master_seed}",
        ]
        for name in sorted(self.sources):
            src = self.sources[name]
            lines.append(f"[source {name}]")
            lines.append(f"kind={src.kind}")
            lines.append(f"episodes={src.episodes}")
            for rel, frames, sha in src.files:
                lines.append(f"file={rel} frames={frames} sha256={sha}")
        for emb in sorted(self.stats):
            lines.append(f"[stats {emb}]")
            lines.extend(self.stats[emb].to_lines())
        return lines

    def save(self) -> Path:
        lines = self._canonical_lines()
        # generated_at sits after the magic line and is excluded from the hash
        out = [lines[0], f"generated_at={self.generated_at}",
               f"content_hash={self.content_hash()}"] + lines[1:]
        path = self.root / "manifest.txt"
        path.write_text("\n".join(out) + "\n")
        return path


def load_manifest(root: str | Path) -> Manifest:
    root = Path(root)
    path = root / "manifest.txt"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    lines = path.read_text().splitlines()
    magic, _, version = lines[0].partition(" ")
    if magic != MANIFEST_MAGIC or version != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: unsupported manifest header {lines[0]!r}")
    meta: dict[str, str] = {}
    sources: dict[str, SourceInfo] = {}
    stats: dict[str, NormStats] = {}
    section: tuple[str, str] | None = None
    section_fields: dict[str, str] = {}

    def flush():
        nonlocal section_fields
        if section and section[0] == "stats":
            stats[section[1]] = NormStats.from_fields(section_fields)
        section_fields = {}

    current_source: SourceInfo | None = None
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("[source "):
            flush()
            name = line[len("[source "):-1]
            current_source = SourceInfo(name=name, kind="robot")
            sources[name] = current_source
            section = ("source", name)
        elif line.startswith("[stats "):
            flush()
            section = ("stats", line[len("[stats "):-1])
            current_source = None
        elif line.startswith("file="):
            body = line[len("file="):]
            rel, frames_kv, sha_kv = body.split(" ")
            current_source.files.append(
                (rel, int(frames_kv.split("=")[1]), sha_kv.split("=")[1])
            )
        else:
            key, _, value = line.partition("=")
            if section is None:
                meta[key] = value
            elif section[0] == "source":
                if key == "kind":
                    current_source.kind = value
            else:
                section_fields[key] = value
    flush()
    manifest = Manifest(
        root=root,
        image_size=int(meta["image_size"]),
        views=int(meta["views"]),
        master_seed=int(meta["master_seed"]),
        sources=sources,
        stats=stats,
        generated_at=meta.get("generated_at", ""),
    )
    declared = meta.get("content_hash")
    if declared and declared != manifest.content_hash():
        raise CorruptEpisodeError(f"{path}: manifest content hash mismatch")
    return manifest


# --------------------------------------------------------------------------
# weighted multi-source batch sampler
# --------------------------------------------------------------------------

@dataclass
class WindowBatch:
    """One training batch drawn from exactly one source."""

    source: str
    kind: str  # robot | human
    embodiment_ids: list[str]
    instructions: np.ndarray  # (B, L) int64 token ids
    frames_t: np.ndarray  # (B, K, H, W, 3) float32
    frames_th: np.ndarray  # (B, K, H, W, 3)
    proprio_t: np.ndarray | None  # (B, S)
    proprio_chunk: np.ndarray | None  # (B, h, S)
    actions: np.ndarray | None  # (B, h, A)
    action_mask: np.ndarray | None  # (B, A) bool
    proprio_mask: np.ndarray | None  # (B, S) bool
    identifiers: list[tuple[str, int]]  # (relpath, window start)

    @property
    def size(self) -> int:
        return self.frames_t.shape[0]


class WindowSampler:
    """Deterministic stream of single-source window batches.

    Each batch picks a source by configured weight, then episodes and window
    start indices uniformly within that source.  Windows never cross episode
    boundaries: start t satisfies t + h <= T - 1 so the future frame exists
    and actions t..t+h-1 are in range.  The train/holdout split is by episode
    index within each source (every k-th episode held out).
    """

    def __init__(self, manifest: Manifest, sources: list[tuple[str, float]],
                 horizon: int, batch_size: int, seed: int,
                 holdout_fraction: float = 0.1, split: str = "train"):
        if split not in ("train", "holdout"):
            raise ValueError(f"split must be train or holdout, got {split!r}")
        self.manifest = manifest
        self.horizon = horizon
        self.batch_size = batch_size
        self.seed = seed
        self._cache = _HandleCache()
        self._rng = np.random.default_rng(seed)
        keep_every = max(2, round(1.0 / holdout_fraction)) if holdout_fraction > 0 else 0

        self.sources: list[str] = []
        self.weights: list[float] = []
        self._files: dict[str, list[tuple[str, int]]] = {}
        for name, weight in sources:
            if name not in manifest.sources:
                raise KeyError(f"source {name!r} not in manifest "
                               f"(has {sorted(manifest.sources)})")
            info = manifest.sources[name]
            chosen = []
            for i, (rel, frames, _sha) in enumerate(info.files):
                in_holdout = keep_every > 0 and i % keep_every == 0
                if (split == "holdout") != in_holdout:
                    continue
                if frames < horizon + 1:
                    continue  # too short for one window
                chosen.append((rel, frames))
            if not chosen:
                warnings.warn(
                    f"source {name!r} excluded: no {split} episode of length >= {horizon + 1}"
                )
                continue
            self.sources.append(name)
            self.weights.append(weight)
            self._files[name] = chosen
        if not self.sources:
            raise ValueError("no usable sources after length filtering")
        total = sum(self.weights)
        self.weights = [w / total for w in self.weights]

    def _load_window(self, source: str, rel: str, t: int):
        handle = self._cache.get(self.manifest.root / rel)
        h = self.horizon
        frames = handle.array("frames")
        sample = {
            "embodiment_id": handle.embodiment_id,
            "instruction": language.encode(handle.instruction),
            "frame_t": np.asarray(frames[t], dtype=np.float32),
            "frame_th": np.asarray(frames[t + h], dtype=np.float32),
        }
        if handle.source_kind == "robot":
            proprio = handle.array("proprio")
            actions = handle.array("actions")
            sample["proprio_t"] = np.asarray(proprio[t], dtype=np.float32)
            sample["proprio_chunk"] = np.asarray(proprio[t:t + h], dtype=np.float32)
            sample["actions"] = np.asarray(actions[t:t + h], dtype=np.float32)
            sample["action_mask"] = handle.mask("action")
            sample["proprio_mask"] = handle.mask("proprio")
        return sample

    def _assemble(self, source: str, picks: list[tuple[str, int]]) -> WindowBatch:
        kind = self.manifest.sources[source].kind
        samples = [self._load_window(source, rel, t) for rel, t in picks]
        batch = WindowBatch(
            source=source,
            kind=kind,
            embodiment_ids=[s["embodiment_id"] for s in samples],
            instructions=np.array([s["instruction"] for s in samples], dtype=np.int64),
            frames_t=np.stack([s["frame_t"] for s in samples]),
            frames_th=np.stack([s["frame_th"] for s in samples]),
            proprio_t=None, proprio_chunk=None, actions=None,
            action_mask=None, proprio_mask=None,
            identifiers=picks,
        )
        if kind == "robot":
            batch.proprio_t = np.stack([s["proprio_t"] for s in samples])
            batch.proprio_chunk = np.stack([s["proprio_chunk"] for s in samples])
            batch.actions = np.stack([s["actions"] for s in samples])
            batch.action_mask = np.stack([s["action_mask"] for s in samples])
            batch.proprio_mask = np.stack([s["proprio_mask"] for s in samples])
        return batch

    def draw_picks(self) -> tuple[str, list[tuple[str, int]]]:
        """Source and (episode, window-start) identifiers for one batch."""
        source = self.sources[int(self._rng.choice(len(self.sources), p=self.weights))]
        files = self._files[source]
        picks = []
        for _ in range(self.batch_size):
            rel, frames = files[int(self._rng.integers(len(files)))]
            t = int(self._rng.integers(frames - self.horizon))
            picks.append((rel, t))
        return source, picks

    def next_batch(self) -> WindowBatch:
        source, picks = self.draw_picks()
        return self._assemble(source, picks)

    def __iter__(self):
        while True:
            yield self.next_batch()

    def fixed_eval_batches(self, n_windows: int, seed: int,
                           kind: str | None = None) -> list[WindowBatch]:
        """Deterministic evaluation batches, independent of the training stream."""
        rng = np.random.default_rng(seed)
        out = []
        for name in self.sources:
            if kind is not None and self.manifest.sources[name].kind != kind:
                continue
            files = self._files[name]
            picks = []
            per_source = max(1, n_windows // max(1, len(self.sources)))
            for _ in range(per_source):
                rel, frames = files[int(rng.integers(len(files)))]
                picks.append((rel, int(rng.integers(frames - self.horizon))))
            for start in range(0, len(picks), self.batch_size):
                out.append(self._assemble(name, picks[start:start + self.batch_size]))
        return out
