"""Trajectory logging, the on-disk dataset format, and training-window sampling.

Dataset file layout (all integers little-endian):

    magic   b"MQDS"
    u16     format version (1)
    u32     episode count
    u32     header length, then header JSON:
              {"schema", "d_state", "k_intr", "scenario_order": [id, ...],
               "scenarios": {id: scenario file text}}
    episode blocks, one per episode:
      u32   compressed payload length
      u32   crc32 of the compressed payload
      u16   step count
      u16   scenario index (into scenario_order)
      bytes zlib-compressed payload

Payload: u32 meta length + meta JSON {scenario_id, seed, outcome, return},
then per step: u16 n_units, n u8 controllable flags, n*17 f64 states,
n i16 actions (-1 = no logged action), n*(k_intr+n) u8 availability,
n*n u8 visibility. Episodes decode independently, so the file streams.

A logged step holds the pre-action state; the model learns to predict the
step's action from states up to and including it. Enemy actions are not
logged — the built-in opponent script is deterministic, so replay recomputes
them.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import arena
from .arena import K_INTR, ScenarioConfig


MAGIC = b"MQDS"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


@dataclass
class StepRecord:
    states: np.ndarray        # [N, 17] float64, pre-action
    actions: np.ndarray       # [N] int16, -1 where no action was logged
    avail: np.ndarray         # [N, K_INTR + N] bool
    visible: np.ndarray       # [N, N] bool
    controllable: np.ndarray  # [N] bool

    @property
    def n_units(self) -> int:
        return len(self.actions)


@dataclass
class EpisodeRecord:
    scenario_id: str
    seed: int
    steps: list
    outcome: str
    episode_return: float

    def __len__(self) -> int:
        return len(self.steps)


def record_episode(cfg: ScenarioConfig, ally_policy, rng: np.random.Generator,
                   enemy_policy=arena.enemy_policy) -> EpisodeRecord:
    """Roll one episode; ally actions from ally_policy(w, i), enemies scripted.

    The episode seed is drawn from rng, so one generator yields a reproducible
    stream of distinct episodes.
    """
    seed = int(rng.integers(0, 2 ** 31 - 1))
    w = arena.reset(cfg.with_seed(seed))
    steps = []
    while arena.terminal(w) == "ongoing":
        n = w.n_units
        states = arena.encode_state(w)
        visible = arena.visibility(w)
        actions_arr = np.full(n, -1, dtype=np.int16)
        avail = np.zeros((n, K_INTR + n), dtype=bool)
        joint = {}
        for i in range(n):
            if not w.alive[i]:
                continue
            if w.team[i]:
                avail[i] = arena.available_actions(w, i)
                a = int(ally_policy(w, i))
                actions_arr[i] = a
                joint[i] = a
            else:
                joint[i] = int(enemy_policy(w, i))
        steps.append(StepRecord(states=states, actions=actions_arr, avail=avail,
                                visible=visible, controllable=w.team.copy()))
        w, _ = arena.step(w, joint)
    return EpisodeRecord(scenario_id=cfg.scenario_id, seed=seed, steps=steps,
                         outcome=arena.terminal(w),
                         episode_return=arena.episode_return(w))


def replay_episode(record: EpisodeRecord, cfg: ScenarioConfig,
                   enemy_policy=arena.enemy_policy) -> None:
    """Re-simulate from the logged seed; raises DatasetError on any mismatch."""
    w = arena.reset(cfg.with_seed(record.seed))
    for t, step_rec in enumerate(record.steps):
        if not np.array_equal(arena.encode_state(w), step_rec.states):
            raise DatasetError(f"replay diverged at step {t}: states differ")
        joint = {}
        for i in range(w.n_units):
            if not w.alive[i]:
                continue
            if w.team[i]:
                a = int(step_rec.actions[i])
                if a < 0:
                    raise DatasetError(f"replay step {t}: living ally {i} has no action")
                if not step_rec.avail[i, a]:
                    raise DatasetError(f"replay step {t}: logged action {a} was unavailable")
                joint[i] = a
            else:
                joint[i] = int(enemy_policy(w, i))
        w, _ = arena.step(w, joint)
    if arena.terminal(w) != record.outcome:
        raise DatasetError(f"replay outcome {arena.terminal(w)!r} != logged {record.outcome!r}")


def _encode_episode(record: EpisodeRecord) -> bytes:
    meta = json.dumps({"scenario_id": record.scenario_id, "seed": record.seed,
                       "outcome": record.outcome,
                       "return": record.episode_return}).encode()
    parts = [struct.pack("<I", len(meta)), meta]
    for s in record.steps:
        n = s.n_units
        parts.append(struct.pack("<H", n))
        parts.append(s.controllable.astype(np.uint8).tobytes())
        parts.append(s.states.astype("<f8").tobytes(order="C"))
        parts.append(s.actions.astype("<i2").tobytes())
        parts.append(s.avail.astype(np.uint8).tobytes(order="C"))
        parts.append(s.visible.astype(np.uint8).tobytes(order="C"))
    return b"".join(parts)


def _decode_episode(raw: bytes, n_steps: int) -> EpisodeRecord:
    (meta_len,) = struct.unpack_from("<I", raw, 0)
    off = 4
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    steps = []
    for _ in range(n_steps):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        controllable = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).astype(bool)
        off += n
        states = np.frombuffer(raw, dtype="<f8", count=n * arena.D_STATE,
                               offset=off).reshape(n, arena.D_STATE).astype(np.float64)
        off += n * arena.D_STATE * 8
        actions = np.frombuffer(raw, dtype="<i2", count=n, offset=off).astype(np.int16)
        off += n * 2
        width = K_INTR + n
        avail = np.frombuffer(raw, dtype=np.uint8, count=n * width,
                              offset=off).reshape(n, width).astype(bool)
        off += n * width
        visible = np.frombuffer(raw, dtype=np.uint8, count=n * n,
                                offset=off).reshape(n, n).astype(bool)
        off += n * n
        steps.append(StepRecord(states=states, actions=actions, avail=avail,
                                visible=visible, controllable=controllable))
    if off != len(raw):
        raise DatasetChecksumError("episode payload has trailing or missing bytes")
    return EpisodeRecord(scenario_id=meta["scenario_id"], seed=meta["seed"],
                         steps=steps, outcome=meta["outcome"],
                         episode_return=meta["return"])


def write_dataset(path, episodes, scenarios: dict[str, ScenarioConfig]) -> int:
    """Write episodes (any iterable) to path; returns the episode count."""
    order = sorted(scenarios)
    scen_idx = {sid: i for i, sid in enumerate(order)}
    header = json.dumps({
        "schema": FORMAT_VERSION,
        "d_state": arena.D_STATE,
        "k_intr": K_INTR,
        "scenario_order": order,
        "scenarios": {sid: arena.scenario_to_text(cfg) for sid, cfg in scenarios.items()},
    }).encode()
    count = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        count_pos = f.tell()
        f.write(struct.pack("<I", 0))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for record in episodes:
            if record.scenario_id not in scen_idx:
                raise DatasetError(f"episode references unknown scenario {record.scenario_id!r}")
            payload = zlib.compress(_encode_episode(record), 1)
            f.write(struct.pack("<IIHH", len(payload), zlib.crc32(payload),
                                len(record.steps), scen_idx[record.scenario_id]))
            f.write(payload)
            count += 1
        f.seek(count_pos)
        f.write(struct.pack("<I", count))
    return count


class Dataset:
    """Random-access, streaming reader with a small decoded-episode cache."""

    def __init__(self, path, cache_size: int = 64):
        self._path = path
        self._cache_size = cache_size
        self._cache: OrderedDict[int, EpisodeRecord] = OrderedDict()
        self._f = open(path, "rb")
        try:
            self._read_index()
        except Exception:
            self._f.close()
            raise

    def _read_index(self):
        f = self._f
        if f.read(4) != MAGIC:
            raise DatasetError(f"{self._path}: not a dataset file")
        (version,) = struct.unpack("<H", f.read(2))
        if version != FORMAT_VERSION:
            raise DatasetVersionError(
                f"{self._path}: format version {version}, expected {FORMAT_VERSION}")
        (count,) = struct.unpack("<I", f.read(4))
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        self.scenario_order = header["scenario_order"]
        self.scenarios = {sid: arena.scenario_from_text(text)
                          for sid, text in header["scenarios"].items()}
        self._index = []   # (offset, payload_len, crc, n_steps, scenario_idx)
        lengths = []
        for _ in range(count):
            head = f.read(12)
            if len(head) < 12:
                raise DatasetChecksumError(f"{self._path}: truncated episode table")
            plen, crc, n_steps, sidx = struct.unpack("<IIHH", head)
            self._index.append((f.tell(), plen, crc, n_steps, sidx))
            lengths.append(n_steps)
            f.seek(plen, 1)
            if f.tell() > self._file_size():
                raise DatasetChecksumError(f"{self._path}: truncated episode payload")
        self.lengths = np.array(lengths, dtype=np.int64)

    def _file_size(self) -> int:
        pos = self._f.tell()
        self._f.seek(0, 2)
        size = self._f.tell()
        self._f.seek(pos)
        return size

    def __len__(self) -> int:
        return len(self._index)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        self._f.close()

    @property
    def cache_fill(self) -> int:
        return len(self._cache)

    def episode(self, i: int) -> EpisodeRecord:
        if i in self._cache:
            self._cache.move_to_end(i)
            return self._cache[i]
        offset, plen, crc, n_steps, _ = self._index[i]
        self._f.seek(offset)
        payload = self._f.read(plen)
        if len(payload) != plen or zlib.crc32(payload) != crc:
            raise DatasetChecksumError(f"{self._path}: episode {i} failed its checksum")
        record = _decode_episode(zlib.decompress(payload), n_steps)
        self._cache[i] = record
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return record

    def iter_episodes(self):
        for i in range(len(self)):
            yield self.episode(i)

    def scenario_of(self, i: int) -> ScenarioConfig:
        return self.scenarios[self.scenario_order[self._index[i][4]]]


class DatasetView:
    """A scenario-filtered view of a Dataset; samples like the real thing."""

    def __init__(self, ds: Dataset, scenario_ids):
        wanted = set(scenario_ids)
        unknown = wanted - set(ds.scenario_order)
        if unknown:
            raise DatasetError(f"unknown scenario ids in view: {sorted(unknown)}")
        self._ds = ds
        self._indices = [i for i in range(len(ds))
                         if ds.scenario_order[ds._index[i][4]] in wanted]
        if not self._indices:
            raise DatasetError("dataset view selects no episodes")
        self.scenario_order = [sid for sid in ds.scenario_order if sid in wanted]
        self.scenarios = {sid: ds.scenarios[sid] for sid in self.scenario_order}
        self.lengths = ds.lengths[self._indices]

    def __len__(self) -> int:
        return len(self._indices)

    def episode(self, i: int) -> EpisodeRecord:
        return self._ds.episode(self._indices[i])

    def iter_episodes(self):
        for i in range(len(self)):
            yield self.episode(i)


@dataclass
class TrainingWindow:
    """L consecutive steps ending inside one episode, left-padded at the start.

    Pad steps (and unit slots that do not exist yet at early steps) carry zero
    states, are excluded from the loss, and get cut out of attention except
    for their own diagonal entry.
    """
    scenario_id: str
    n_units: int
    states: np.ndarray    # [L, N, d_state]
    targets: np.ndarray   # [L, N] int64, -1 = no loss term
    include: np.ndarray   # [L, N] bool
    visible: np.ndarray   # [L, N, N] bool
    absent: np.ndarray    # [L, N] bool
    pad_steps: np.ndarray  # [L] bool

    @property
    def L(self) -> int:
        return self.states.shape[0]


def build_window(record: EpisodeRecord, end_step: int, L: int) -> TrainingWindow:
    if not 0 <= end_step < len(record.steps):
        raise DatasetError(f"end step {end_step} outside episode of {len(record.steps)} steps")
    n = record.steps[end_step].n_units
    states = np.zeros((L, n, arena.D_STATE))
    targets = np.full((L, n), -1, dtype=np.int64)
    include = np.zeros((L, n), dtype=bool)
    visible = np.zeros((L, n, n), dtype=bool)
    visible[:, np.arange(n), np.arange(n)] = True
    absent = np.ones((L, n), dtype=bool)
    pad = np.ones(L, dtype=bool)
    for slot in range(L):
        t = end_step - (L - 1) + slot
        if t < 0:
            continue
        s = record.steps[t]
        nt = s.n_units
        pad[slot] = False
        absent[slot, :nt] = False
        states[slot, :nt] = s.states
        targets[slot, :nt] = s.actions
        include[slot, :nt] = s.controllable & (s.actions >= 0)
        visible[slot, :nt, :nt] = s.visible
    return TrainingWindow(scenario_id=record.scenario_id, n_units=n, states=states,
                          targets=targets, include=include, visible=visible,
                          absent=absent, pad_steps=pad)


def sample_windows(ds: Dataset, batch_size: int, L: int,
                   rng: np.random.Generator) -> list[TrainingWindow]:
    """Uniform over (episode, end-step) pairs across the whole dataset."""
    if len(ds) == 0:
        raise DatasetError("cannot sample from an empty dataset")
    cumulative = np.cumsum(ds.lengths)
    total = int(cumulative[-1])
    draws = rng.integers(0, total, size=batch_size)
    out = []
    for r in draws:
        epi = int(np.searchsorted(cumulative, r, side="right"))
        end = int(r - (cumulative[epi - 1] if epi else 0))
        out.append(build_window(ds.episode(epi), end, L))
    return out
