"""ArenaLite: a deterministic grid micro-battle environment.

Two teams of typed units (fighter / healer / tank) fight on a small grid with
Chebyshev geometry. Allies (team 0, listed first) are the controllable agents;
enemies run on a built-in script. Everything — movement collisions, combat,
visibility, the scripted policies — is deterministic given the scenario config
and seed.

Action ids: 0 no-op, 1 stop, 2..5 move N/E/S/W, 6+j targets unit j (attack an
enemy, heal an ally). Combat applies simultaneously from the pre-step snapshot
of positions and hp, so index order matters only for movement.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

K_INTR = 6
NOOP, STOP = 0, 1
# move action id = 2 + direction index; directions in N, E, S, W order
DIRS = ((0, 1), (1, 0), (0, -1), (-1, 0))
DIR_NAMES = ("N", "E", "S", "W")

TYPE_ORDER = ("fighter", "healer", "tank", "reserved")
D_STATE = 17
# state vector layout (width 17):
#   [0] ally flag, [1] alive flag, [2:6] type one-hot,
#   [6] x/(W-1), [7] y/(H-1), [8] hp fraction, [9] cooldown fraction,
#   [10:16] last intrinsic action one-hot, [16] last action interactive flag


class ArenaError(ValueError):
    """Invalid scenario, action, or world manipulation."""


class ScenarioFormatError(ArenaError):
    """Malformed scenario file."""


@dataclass(frozen=True)
class UnitTypeStats:
    max_hp: float
    damage: float
    heal: float
    attack_range: int
    sight_range: int
    cooldown: int


# tuned so the scripted expert's focus fire, tank-fronting, and healer sustain
# decisively beat the nearest-target opponent script on the training suite
DEFAULT_STATS = {
    "fighter": UnitTypeStats(max_hp=10, damage=3, heal=0, attack_range=2, sight_range=6, cooldown=1),
    "tank": UnitTypeStats(max_hp=24, damage=2, heal=0, attack_range=1, sight_range=6, cooldown=1),
    "healer": UnitTypeStats(max_hp=12, damage=0, heal=4, attack_range=4, sight_range=6, cooldown=0),
}


@dataclass(frozen=True)
class UnitSpec:
    unit_type: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    allies: tuple[UnitSpec, ...]
    enemies: tuple[UnitSpec, ...]
    width: int = 16
    height: int = 16
    max_steps: int = 60
    seed: int = 0
    spawn_jitter: int = 0
    stats: dict = field(default_factory=lambda: dict(DEFAULT_STATS))

    def validate(self) -> None:
        if not self.allies or not self.enemies:
            raise ArenaError(f"{self.scenario_id}: both teams need at least one unit")
        if self.width < 2 or self.height < 2:
            raise ArenaError(f"{self.scenario_id}: grid too small")
        seen = set()
        for spec in tuple(self.allies) + tuple(self.enemies):
            if spec.unit_type not in self.stats:
                raise ArenaError(f"{self.scenario_id}: unknown unit type {spec.unit_type!r}")
            x, y = spec.cell
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ArenaError(f"{self.scenario_id}: spawn {spec.cell} out of bounds")
            if spec.cell in seen:
                raise ArenaError(f"{self.scenario_id}: duplicate spawn cell {spec.cell}")
            seen.add(spec.cell)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return dataclasses.replace(self, seed=int(seed))

    @property
    def n_units(self) -> int:
        return len(self.allies) + len(self.enemies)

    @property
    def n_controllable(self) -> int:
        return len(self.allies)


@dataclass
class WorldState:
    cfg: ScenarioConfig
    t: int
    types: np.ndarray          # int [N], index into TYPE_ORDER
    team: np.ndarray           # bool [N], True = ally/controllable
    x: np.ndarray              # int [N]
    y: np.ndarray              # int [N]
    hp: np.ndarray             # float [N]
    cooldown: np.ndarray       # int [N]
    alive: np.ndarray          # bool [N]
    last_intrinsic: np.ndarray  # int [N], -1 = none yet
    last_interactive: np.ndarray  # bool [N]
    rng: np.random.Generator
    # per-unit stat columns, precomputed from cfg
    max_hp: np.ndarray = None
    damage: np.ndarray = None
    heal: np.ndarray = None
    attack_range: np.ndarray = None
    sight: np.ndarray = None
    cooldown_max: np.ndarray = None

    @property
    def n_units(self) -> int:
        return len(self.types)

    def copy(self) -> "WorldState":
        return WorldState(
            cfg=self.cfg, t=self.t,
            types=self.types.copy(), team=self.team.copy(),
            x=self.x.copy(), y=self.y.copy(), hp=self.hp.copy(),
            cooldown=self.cooldown.copy(), alive=self.alive.copy(),
            last_intrinsic=self.last_intrinsic.copy(),
            last_interactive=self.last_interactive.copy(),
            rng=self.rng,
            max_hp=self.max_hp.copy(), damage=self.damage.copy(), heal=self.heal.copy(),
            attack_range=self.attack_range.copy(), sight=self.sight.copy(),
            cooldown_max=self.cooldown_max.copy(),
        )


def _fill_stats(w: WorldState) -> None:
    stats = [w.cfg.stats[TYPE_ORDER[t]] for t in w.types]
    w.max_hp = np.array([s.max_hp for s in stats], dtype=np.float64)
    w.damage = np.array([s.damage for s in stats], dtype=np.float64)
    w.heal = np.array([s.heal for s in stats], dtype=np.float64)
    w.attack_range = np.array([s.attack_range for s in stats], dtype=np.int64)
    w.sight = np.array([s.sight_range for s in stats], dtype=np.int64)
    w.cooldown_max = np.array([s.cooldown for s in stats], dtype=np.int64)


def _nearest_free_cell(target, occupied, width, height):
    """Deterministic nearest free cell by Chebyshev rings, scanning (y, x)."""
    tx, ty = target
    for r in range(max(width, height)):
        best = None
        for yy in range(max(0, ty - r), min(height, ty + r + 1)):
            for xx in range(max(0, tx - r), min(width, tx + r + 1)):
                if max(abs(xx - tx), abs(yy - ty)) != r:
                    continue
                if (xx, yy) not in occupied:
                    if best is None:
                        best = (xx, yy)
            if best is not None:
                break
        if best is not None:
            return best
    raise ArenaError("no free cell on the grid")


def reset(cfg: ScenarioConfig) -> WorldState:
    """Initial world: full hp, zero cooldowns, t = 0.

    With spawn_jitter > 0, each unit lands on the nearest free cell to its
    spawn cell offset by a seeded draw in [-jitter, jitter]^2; jitter 0 places
    units exactly on their spawn cells.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    specs = tuple(cfg.allies) + tuple(cfg.enemies)
    n = len(specs)
    types = np.array([TYPE_ORDER.index(s.unit_type) for s in specs], dtype=np.int64)
    team = np.array([i < len(cfg.allies) for i in range(n)], dtype=bool)
    xs = np.zeros(n, dtype=np.int64)
    ys = np.zeros(n, dtype=np.int64)
    occupied = set()
    for i, spec in enumerate(specs):
        cx, cy = spec.cell
        if cfg.spawn_jitter > 0:
            dx, dy = rng.integers(-cfg.spawn_jitter, cfg.spawn_jitter + 1, size=2)
            cx = int(np.clip(cx + dx, 0, cfg.width - 1))
            cy = int(np.clip(cy + dy, 0, cfg.height - 1))
        cell = _nearest_free_cell((cx, cy), occupied, cfg.width, cfg.height)
        occupied.add(cell)
        xs[i], ys[i] = cell
    w = WorldState(
        cfg=cfg, t=0, types=types, team=team, x=xs, y=ys,
        hp=np.zeros(n), cooldown=np.zeros(n, dtype=np.int64),
        alive=np.ones(n, dtype=bool),
        last_intrinsic=np.full(n, -1, dtype=np.int64),
        last_interactive=np.zeros(n, dtype=bool),
        rng=rng,
    )
    _fill_stats(w)
    w.hp = w.max_hp.copy()
    return w


def chebyshev(w: WorldState, i: int) -> np.ndarray:
    """Chebyshev distance from unit i to every unit."""
    return np.maximum(np.abs(w.x - w.x[i]), np.abs(w.y - w.y[i]))


def visibility(w: WorldState) -> np.ndarray:
    """visible[i, j]: unit i sees unit j now. Dead observers see only themselves."""
    n = w.n_units
    dx = np.abs(w.x[:, None] - w.x[None, :])
    dy = np.abs(w.y[:, None] - w.y[None, :])
    cheb = np.maximum(dx, dy)
    vis = w.alive[:, None] & w.alive[None, :] & (cheb <= w.sight[:, None])
    vis[np.arange(n), np.arange(n)] = True
    return vis


def _occupied_cells(w: WorldState) -> set:
    return {(int(w.x[i]), int(w.y[i])) for i in range(w.n_units) if w.alive[i]}


def available_actions(w: WorldState, i: int) -> np.ndarray:
    """Boolean availability over the 6 + N action slots of unit i."""
    n = w.n_units
    if not 0 <= i < n:
        raise ArenaError(f"unit index {i} out of range (N={n})")
    avail = np.zeros(K_INTR + n, dtype=bool)
    if not w.alive[i]:
        avail[NOOP] = True
        return avail
    avail[STOP] = True
    occ = _occupied_cells(w)
    for d, (dx, dy) in enumerate(DIRS):
        nx, ny = int(w.x[i]) + dx, int(w.y[i]) + dy
        if 0 <= nx < w.cfg.width and 0 <= ny < w.cfg.height and (nx, ny) not in occ:
            avail[2 + d] = True
    cheb = chebyshev(w, i)
    visible = w.alive & (cheb <= w.sight[i])
    in_range = visible & (cheb <= w.attack_range[i])
    if w.damage[i] > 0 and w.cooldown[i] == 0:
        targets = in_range & (w.team != w.team[i])
        avail[K_INTR:][targets] = True
    if w.heal[i] > 0:
        mates = in_range & (w.team == w.team[i])
        mates[i] = False
        avail[K_INTR:][mates] = True
    return avail


def step(w: WorldState, actions) -> tuple[WorldState, list]:
    """Advance one tick. `actions` maps unit index -> action id for every living unit.

    Resolution: (1) moves in ascending unit index, blocked moves become stop;
    (2) attacks and heals from the pre-step snapshot, summed per receiver,
    attacker cooldown reset, everyone else's cooldown decremented; (3) hp
    clamped, deaths applied; (4) t advances.
    """
    n = w.n_units
    for i in range(n):
        if w.alive[i]:
            if i not in actions:
                raise ArenaError(f"living unit {i} has no action")
        elif i in actions and actions[i] != NOOP:
            raise ArenaError(f"dead unit {i} given action {actions[i]}")
    avail = {i: available_actions(w, i) for i in actions}
    for i, a in actions.items():
        if not 0 <= a < K_INTR + n or not avail[i][a]:
            raise ArenaError(f"unit {i}: action {a} not available")

    events = []
    out = w.copy()
    # snapshot for simultaneous combat
    pre_hp = w.hp.copy()

    # phase 1: movement, ascending unit index
    occ = {(int(w.x[i]), int(w.y[i])): i for i in range(n) if w.alive[i]}
    for i in range(n):
        if not w.alive[i]:
            continue
        a = actions[i]
        if 2 <= a < K_INTR:
            dx, dy = DIRS[a - 2]
            src = (int(out.x[i]), int(out.y[i]))
            dst = (src[0] + dx, src[1] + dy)
            if dst in occ:
                events.append(("blocked", i, dst))
            else:
                del occ[src]
                occ[dst] = i
                out.x[i], out.y[i] = dst
                events.append(("move", i, dst))

    # phase 2: simultaneous combat from the pre-step snapshot
    dmg_in = np.zeros(n)
    heal_in = np.zeros(n)
    acted_interactive = np.zeros(n, dtype=bool)
    for i in range(n):
        if not w.alive[i]:
            continue
        a = actions[i]
        if a >= K_INTR:
            j = a - K_INTR
            acted_interactive[i] = True
            if w.team[j] != w.team[i]:
                dmg_in[j] += w.damage[i]
                events.append(("attack", i, j, float(w.damage[i])))
            else:
                heal_in[j] += w.heal[i]
                events.append(("heal", i, j, float(w.heal[i])))
    living = w.alive
    out.cooldown[living] = np.where(
        acted_interactive[living],
        w.cooldown_max[living],
        np.maximum(w.cooldown[living] - 1, 0),
    )

    # phase 3: apply, clamp, deaths
    new_hp = np.clip(pre_hp + heal_in - dmg_in, 0.0, w.max_hp)
    out.hp = np.where(living, new_hp, 0.0)
    died = living & (out.hp <= 0.0)
    for j in np.flatnonzero(died):
        out.alive[j] = False
        out.cooldown[j] = 0
        events.append(("death", int(j)))

    # bookkeeping: last submitted action per living unit
    for i in range(n):
        if not w.alive[i]:
            continue
        a = actions[i]
        if a >= K_INTR:
            out.last_intrinsic[i] = -1
            out.last_interactive[i] = True
        else:
            out.last_intrinsic[i] = a
            out.last_interactive[i] = False

    out.t = w.t + 1
    return out, events


def terminal(w: WorldState) -> str:
    """'ongoing' | 'win' | 'loss' | 'draw'. Simultaneous wipe counts as loss."""
    allies_alive = bool((w.alive & w.team).any())
    enemies_alive = bool((w.alive & ~w.team).any())
    if not allies_alive:
        return "loss"
    if not enemies_alive:
        return "win"
    if w.t >= w.cfg.max_steps:
        return "draw"
    return "ongoing"


def encode_state(w: WorldState) -> np.ndarray:
    """Per-unit feature vectors, [N, 17]. Dead units keep team/type, rest zeroed."""
    n = w.n_units
    s = np.zeros((n, D_STATE))
    s[:, 0] = w.team
    s[:, 1] = w.alive
    s[np.arange(n), 2 + w.types] = 1.0
    live = w.alive
    s[live, 6] = w.x[live] / max(w.cfg.width - 1, 1)
    s[live, 7] = w.y[live] / max(w.cfg.height - 1, 1)
    s[live, 8] = w.hp[live] / w.max_hp[live]
    s[live, 9] = w.cooldown[live] / np.maximum(w.cooldown_max[live], 1)
    for i in np.flatnonzero(live):
        if w.last_intrinsic[i] >= 0:
            s[i, 10 + w.last_intrinsic[i]] = 1.0
    s[live, 16] = w.last_interactive[live]
    return s


def episode_return(w: WorldState) -> float:
    """Dataset metadata on a 20-point scale: damage share plus win bonus."""
    enemy = ~w.team
    destroyed = 1.0 - float(w.hp[enemy].sum()) / float(w.max_hp[enemy].sum())
    return 10.0 * destroyed + (10.0 if terminal(w) == "win" else 0.0)


# ---------------------------------------------------------------------------
# scripted policies
# ---------------------------------------------------------------------------

def _nearest_opponent(w: WorldState, i: int, cheb: np.ndarray) -> int:
    opp = w.alive & (w.team != w.team[i]) & (cheb <= w.sight[i])
    if not opp.any():
        return -1
    d = np.where(opp, cheb, np.iinfo(np.int64).max)
    return int(np.argmin(d))  # argmin breaks ties by lowest index


def _move_toward(w: WorldState, i: int, tx: int, ty: int, avail: np.ndarray,
                 maximize: bool) -> int:
    """Best available move by resulting Chebyshev distance to (tx, ty).

    Ties resolve in N, E, S, W order; returns -1 when no move is available.
    """
    best_a, best_d = -1, None
    for d, (dx, dy) in enumerate(DIRS):
        a = 2 + d
        if not avail[a]:
            continue
        nd = max(abs(int(w.x[i]) + dx - tx), abs(int(w.y[i]) + dy - ty))
        if best_d is None or (nd > best_d if maximize else nd < best_d):
            best_a, best_d = a, nd
    return best_a


def expert_policy(w: WorldState, i: int, kite: bool = True) -> int:
    """Scripted ally: heal > focus-fire > kite > approach > stop."""
    if not w.alive[i]:
        raise ArenaError(f"expert_policy called for dead unit {i}")
    cheb = chebyshev(w, i)
    visible = w.alive & (cheb <= w.sight[i])
    avail = available_actions(w, i)

    if w.heal[i] > 0:
        wounded = visible & (w.team == w.team[i]) & (w.hp < w.max_hp) \
            & (cheb <= w.attack_range[i])
        wounded[i] = False
        if wounded.any():
            hp = np.where(wounded, w.hp, np.inf)
            return K_INTR + int(np.argmin(hp))

    enemies = visible & (w.team != w.team[i])
    in_range = enemies & (cheb <= w.attack_range[i])
    if w.damage[i] > 0 and w.cooldown[i] == 0 and in_range.any():
        hp = np.where(in_range, w.hp, np.inf)
        return K_INTR + int(np.argmin(hp))

    if kite and w.cooldown[i] > 0 and in_range.any():
        j = _nearest_opponent(w, i, cheb)
        a = _move_toward(w, i, int(w.x[j]), int(w.y[j]), avail, maximize=True)
        if a >= 0:
            return a

    if enemies.any():
        j = _nearest_opponent(w, i, cheb)
        a = _move_toward(w, i, int(w.x[j]), int(w.y[j]), avail, maximize=False)
        if a >= 0:
            return a

    return STOP


def enemy_policy(w: WorldState, i: int) -> int:
    """Built-in opponent: attack the nearest target in range, else advance, else stop."""
    if not w.alive[i]:
        raise ArenaError(f"enemy_policy called for dead unit {i}")
    cheb = chebyshev(w, i)
    opponents = w.alive & (w.team != w.team[i]) & (cheb <= w.sight[i])
    in_range = opponents & (cheb <= w.attack_range[i])
    if w.damage[i] > 0 and w.cooldown[i] == 0 and in_range.any():
        d = np.where(in_range, cheb, np.iinfo(np.int64).max)
        return K_INTR + int(np.argmin(d))
    if opponents.any():
        j = _nearest_opponent(w, i, cheb)
        avail = available_actions(w, i)
        a = _move_toward(w, i, int(w.x[j]), int(w.y[j]), avail, maximize=False)
        if a >= 0:
            return a
    return STOP


def partner_policy(w: WorldState, i: int) -> int:
    """The mid-strength external ally used in mixed-control evaluation.

    This is the opponent script pointed at the other team: nearest-target
    attacks, no healing priority, no kiting. Disabling only the expert's
    kiting rule leaves it practically as strong as the full expert on this
    suite, which would flatten the mixed-control sweep.
    """
    return enemy_policy(w, i)


def insert_unit(w: WorldState, unit_type: str, team: bool, cell: tuple[int, int]) -> WorldState:
    """Append a fresh unit at `cell`; the index order of existing units is kept."""
    x, y = cell
    if not (0 <= x < w.cfg.width and 0 <= y < w.cfg.height):
        raise ArenaError(f"insert cell {cell} out of bounds")
    if any(w.alive[i] and w.x[i] == x and w.y[i] == y for i in range(w.n_units)):
        raise ArenaError(f"insert cell {cell} occupied")
    if unit_type not in w.cfg.stats:
        raise ArenaError(f"unknown unit type {unit_type!r}")
    out = w.copy()
    stats = w.cfg.stats[unit_type]
    out.types = np.append(out.types, TYPE_ORDER.index(unit_type))
    out.team = np.append(out.team, team)
    out.x = np.append(out.x, x)
    out.y = np.append(out.y, y)
    out.hp = np.append(out.hp, stats.max_hp)
    out.cooldown = np.append(out.cooldown, 0)
    out.alive = np.append(out.alive, True)
    out.last_intrinsic = np.append(out.last_intrinsic, -1)
    out.last_interactive = np.append(out.last_interactive, False)
    out.max_hp = np.append(out.max_hp, stats.max_hp)
    out.damage = np.append(out.damage, stats.damage)
    out.heal = np.append(out.heal, stats.heal)
    out.attack_range = np.append(out.attack_range, stats.attack_range)
    out.sight = np.append(out.sight, stats.sight_range)
    out.cooldown_max = np.append(out.cooldown_max, stats.cooldown)
    return out


def free_cell_near_centroid(w: WorldState, team: bool = True) -> tuple[int, int] | None:
    """Nearest free cell to the living team centroid, or None if team is wiped."""
    members = w.alive & (w.team == team)
    if not members.any():
        return None
    cx = int(round(float(w.x[members].mean())))
    cy = int(round(float(w.y[members].mean())))
    try:
        return _nearest_free_cell((cx, cy), _occupied_cells(w), w.cfg.width, w.cfg.height)
    except ArenaError:
        return None


# ---------------------------------------------------------------------------
# scenario files and the built-in suite
# ---------------------------------------------------------------------------

SCENARIO_SCHEMA = 1


def scenario_to_text(cfg: ScenarioConfig) -> str:
    lines = [
        f"schema {SCENARIO_SCHEMA}",
        f"id {cfg.scenario_id}",
        f"grid {cfg.width} {cfg.height}",
        f"max_steps {cfg.max_steps}",
        f"seed {cfg.seed}",
        f"spawn_jitter {cfg.spawn_jitter}",
    ]
    for name in sorted(cfg.stats):
        s = cfg.stats[name]
        lines.append(
            f"unit_type {name} max_hp={s.max_hp:g} damage={s.damage:g} heal={s.heal:g} "
            f"attack_range={s.attack_range} sight_range={s.sight_range} cooldown={s.cooldown}")
    for spec in cfg.allies:
        lines.append(f"ally {spec.unit_type} {spec.cell[0]} {spec.cell[1]}")
    for spec in cfg.enemies:
        lines.append(f"enemy {spec.unit_type} {spec.cell[0]} {spec.cell[1]}")
    return "\n".join(lines) + "\n"


def scenario_from_text(text: str) -> ScenarioConfig:
    fields = {"width": 16, "height": 16, "max_steps": 60, "seed": 0, "spawn_jitter": 0}
    scenario_id = None
    stats = {}
    allies, enemies = [], []
    schema_seen = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        try:
            if key == "schema":
                schema_seen = True
                if int(parts[1]) != SCENARIO_SCHEMA:
                    raise ScenarioFormatError(
                        f"unsupported scenario schema {parts[1]} (expected {SCENARIO_SCHEMA})")
            elif key == "id":
                scenario_id = parts[1]
            elif key == "grid":
                fields["width"], fields["height"] = int(parts[1]), int(parts[2])
            elif key in ("max_steps", "seed", "spawn_jitter"):
                fields[key] = int(parts[1])
            elif key == "unit_type":
                kv = dict(p.split("=", 1) for p in parts[2:])
                stats[parts[1]] = UnitTypeStats(
                    max_hp=float(kv["max_hp"]), damage=float(kv["damage"]),
                    heal=float(kv["heal"]), attack_range=int(kv["attack_range"]),
                    sight_range=int(kv["sight_range"]), cooldown=int(kv["cooldown"]))
            elif key in ("ally", "enemy"):
                spec = UnitSpec(parts[1], (int(parts[2]), int(parts[3])))
                (allies if key == "ally" else enemies).append(spec)
            else:
                raise ScenarioFormatError(f"line {lineno}: unknown key {key!r}")
        except ScenarioFormatError:
            raise
        except (IndexError, KeyError, ValueError) as exc:
            raise ScenarioFormatError(f"line {lineno}: cannot parse {raw!r}") from exc
    if not schema_seen:
        raise ScenarioFormatError("missing schema line")
    if scenario_id is None:
        raise ScenarioFormatError("missing id line")
    cfg = ScenarioConfig(scenario_id=scenario_id, allies=tuple(allies), enemies=tuple(enemies),
                         stats=stats or dict(DEFAULT_STATS), **fields)
    cfg.validate()
    return cfg


def _parse_composition(comp: str) -> list[str]:
    """'2f1h' -> ['fighter', 'fighter', 'healer']."""
    letter = {"f": "fighter", "h": "healer", "t": "tank"}
    out = []
    count = ""
    for ch in comp:
        if ch.isdigit():
            count += ch
        else:
            out.extend([letter[ch]] * int(count or "1"))
            count = ""
    if count:
        raise ArenaError(f"dangling count in composition {comp!r}")
    return out


def _rank_cells(comp_types: list[str], front_x: int, sign: int,
                height: int = 16) -> list[tuple[int, int]]:
    """Battle-line formation: tanks front rank, fighters mid, healers back.

    Cells come out in the composition's written order (that order becomes the
    unit index order), while the x column depends only on the unit's type.
    """
    ranks = {"tank": front_x, "fighter": front_x - sign, "healer": front_x - 2 * sign}
    cells_by_type = {}
    for rank_type in ("tank", "fighter", "healer"):
        members = [t for t in comp_types if t == rank_type]
        span = max(len(members) - 1, 0)
        y0 = (height - 1 - span) // 2
        cells_by_type[rank_type] = [(ranks[rank_type], y0 + k) for k in range(len(members))]
    used = {t: 0 for t in cells_by_type}
    out = []
    for t in comp_types:
        out.append(cells_by_type[t][used[t]])
        used[t] += 1
    return out


def make_scenario(scenario_id: str, ally_comp: str, enemy_comp: str,
                  spawn_jitter: int = 1, max_steps: int = 60,
                  stats: dict | None = None) -> ScenarioConfig:
    """Two facing battle lines two-to-four cells apart (inside sight range)."""
    ally_types = _parse_composition(ally_comp)
    enemy_types = _parse_composition(enemy_comp)
    ally = tuple(UnitSpec(t, c) for t, c in
                 zip(ally_types, _rank_cells(ally_types, 7, 1)))
    enemy = tuple(UnitSpec(t, c) for t, c in
                  zip(enemy_types, _rank_cells(enemy_types, 9, -1)))
    cfg = ScenarioConfig(scenario_id=scenario_id, allies=ally, enemies=enemy,
                         spawn_jitter=spawn_jitter, max_steps=max_steps,
                         stats=dict(stats or DEFAULT_STATS))
    cfg.validate()
    return cfg


# every training scenario clears the >= 90% expert win-rate gate
_TRAINING_SUITE = [
    ("1t2f1h_v_4f", "1t2f1h", "4f"),
    ("3f1t1h_v_5f", "3f1t1h", "5f"),   # fighter first: malfunction target
    ("2t3f1h_v_6f", "2t3f1h", "6f"),   # mixed-control (collaboration) map
    ("1t2f1h_v_3f1t", "1t2f1h", "3f1t"),
    ("1t4f1h_v_4f1t", "1t4f1h", "4f1t"),
    ("1h4f_v_4f", "1h4f", "4f"),
    ("2t4f_v_5f", "2t4f", "5f"),
    ("1t1f1h_v_3f", "1t1f1h", "3f"),
]

_HELDOUT_SUITE = [
    ("2v2f", "2f", "2f"),
    ("3v3f", "3f", "3f"),
    ("5v5f", "5f", "5f"),
    ("5v6f", "5f", "6f"),
    ("7v7f", "7f", "7f"),
    ("8v9f", "8f", "9f"),
    ("9v9f", "9f", "9f"),
    ("9v10f", "9f", "10f"),
    ("3f1h_v_4f", "3f1h", "4f"),
    ("5f1h_v_6f", "5f1h", "6f"),
    ("2f2h_v_5f", "2f2h", "5f"),
    ("1t3f_v_4f", "1t3f", "4f"),
    ("2t3f_v_5f", "2t3f", "5f"),
    ("1t2f1h_v_5f", "1t2f1h", "5f"),
    ("2t2f2h_v_6f", "2t2f2h", "6f"),
    ("1t5f1h_v_6f", "1t5f1h", "6f"),
    ("3t3f_v_6f", "3t3f", "6f"),
    ("2t5f1h_v_7f1t", "2t5f1h", "7f1t"),
    ("6f1h_v_7f", "6f1h", "7f"),
    ("8f1h_v_8f1t", "8f1h", "8f1t"),
]


def training_scenarios() -> list[ScenarioConfig]:
    return [make_scenario(sid, a, e) for sid, a, e in _TRAINING_SUITE]


def heldout_scenarios() -> list[ScenarioConfig]:
    return [make_scenario(sid, a, e) for sid, a, e in _HELDOUT_SUITE]


def scenario_by_id(scenario_id: str) -> ScenarioConfig:
    for sid, a, e in _TRAINING_SUITE + _HELDOUT_SUITE:
        if sid == scenario_id:
            return make_scenario(sid, a, e)
    raise ArenaError(f"unknown scenario id {scenario_id!r}")
