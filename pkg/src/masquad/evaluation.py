"""Execution-mode rollouts, win-rate reports, and the downstream protocols.

Three ways to run the trained team network:

* central — one forward over all units' recent states with the block-causal
  mask (full information).
* strict — one forward per agent over only the tokens that agent could see at
  each past step. Invisible units never enter the computation, so the
  information barrier is exact by construction. Agents whose visible token
  sets coincide share a forward.
* fast — a single forward with the visibility-restricted mask over all tokens.
  With more than one block this can leak information across visibility hops
  (key tokens were themselves computed with their own rows); it is kept as the
  cheap single-pass variant and reported alongside strict.

With unlimited sight and every unit alive, all three modes compute identical
logits. Once a unit dies the modes intentionally diverge: central execution
keeps the dead unit's zeroed token under the full block-causal mask (the same
exposure training had), while visibility excludes dead units, so strict/fast
drop the token.

Episodes inside a report are independent and individually seeded, so results
do not depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import arena, masks, model, numeric
from .arena import K_INTR, ScenarioConfig

WORKERS_ENV_VAR = "MASQUAD_WORKERS"

EXECUTION_MODES = ("central", "strict", "fast")


class EvalError(ValueError):
    pass


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV_VAR, "")
    if raw.strip():
        return max(1, int(raw))
    return max(1, min(4, os.cpu_count() or 1))


def episode_seed(base_seed: int, seed_idx: int, episode_idx: int) -> int:
    return int(np.random.SeedSequence([base_seed, seed_idx, episode_idx]).generate_state(1)[0])


@dataclass
class EvalReport:
    scenario_id: str
    mode: str
    episodes: int
    seeds: int
    win_rate_mean: float
    win_rate_std: float
    per_seed: list
    outcomes: list          # [seeds][episodes] outcome strings
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id, "mode": self.mode,
            "episodes": self.episodes, "seeds": self.seeds,
            "win_rate_mean": self.win_rate_mean, "win_rate_std": self.win_rate_std,
            "per_seed": list(self.per_seed), "outcomes": self.outcomes,
            "meta": self.meta,
        }


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------

class TeamController:
    """Drives the controllable units with the team network in a given mode."""

    def __init__(self, params, cfg: model.ModelConfig, mode: str = "central",
                 select: str = "argmax", rng: np.random.Generator | None = None):
        if mode not in EXECUTION_MODES:
            raise EvalError(f"unknown execution mode {mode!r}")
        self.params = params
        self.cfg = cfg
        self.mode = mode
        self.select = select
        self.rng = rng
        self.reset()

    def reset(self):
        self._states_hist: list[np.ndarray] = []
        self._vis_hist: list[np.ndarray] = []

    def observe(self, w: arena.WorldState):
        self._states_hist.append(arena.encode_state(w))
        self._vis_hist.append(arena.visibility(w))

    def act(self, w: arena.WorldState, agents=None) -> dict:
        """Actions for the requested living controllable agents (default: all).

        Dead controllable units are pinned to no-op. observe(w) must have been
        called for the current step first.
        """
        if agents is None:
            agents = [i for i in range(w.n_units) if w.team[i]]
        logits = self.logits_for(w, [i for i in agents if w.alive[i]])
        actions = {}
        for i in agents:
            if not w.alive[i]:
                actions[i] = arena.NOOP
                continue
            actions[i] = model.select_action(logits[i], self.select, self.rng)
        return actions

    # --- window assembly -------------------------------------------------

    def _window(self):
        L = self.cfg.context_len
        states = self._states_hist[-L:]
        vis = self._vis_hist[-L:]
        n_eff = len(states)
        positions = np.arange(L - n_eff, L)
        return states, vis, positions

    def logits_for(self, w: arena.WorldState, agents) -> dict[int, model.GarLogits]:
        if not self._states_hist:
            raise EvalError("controller.observe was not called this step")
        if self.mode == "strict":
            return self._logits_strict(w, agents)
        return self._logits_single_pass(w, agents)

    def _logits_single_pass(self, w, agents):
        states, vis, positions = self._window()
        n = w.n_units
        L_eff = len(states)
        grid_states = np.zeros((L_eff, n, self.cfg.d_state))
        absent = np.ones((L_eff, n), dtype=bool)
        vis_grid = np.zeros((L_eff, n, n), dtype=bool)
        vis_grid[:, np.arange(n), np.arange(n)] = True
        for t, (s, v) in enumerate(zip(states, vis)):
            nt = s.shape[0]
            grid_states[t, :nt] = s
            absent[t, :nt] = False
            vis_grid[t, :nt, :nt] = v
        if self.mode == "central":
            allow = masks.build_base_mask(L_eff, n)
        else:  # fast
            allow = masks.build_local_mask(
                masks.VisibilitySet(L_eff, n, vis_grid), L_eff, n)
        allow = masks.exclude_tokens(allow, absent).allow
        with numeric.no_grad():
            h = model.forward_tokens(self.params, self.cfg,
                                     grid_states.reshape(L_eff * n, -1),
                                     np.repeat(positions, n), allow)
            exec_tokens = np.array([(L_eff - 1) * n + i for i in agents], dtype=np.intp)
            recv = (L_eff - 1) * n + np.arange(n)
            out = {}
            if len(agents):
                logits = model.combined_logits(self.params, h, exec_tokens,
                                               np.tile(recv, (len(agents), 1))).data
                for row, i in enumerate(agents):
                    out[i] = self._gar(w, i, logits[row, :K_INTR], logits[row, K_INTR:])
        return out

    def _logits_strict(self, w, agents):
        states, vis, positions = self._window()
        L_eff = len(states)
        n = w.n_units
        groups: dict[tuple, list[int]] = {}
        token_sets: dict[tuple, list[tuple[int, int]]] = {}
        for i in agents:
            tokens = []
            for t in range(L_eff):
                nt = states[t].shape[0]
                if i >= nt:
                    continue  # the agent did not exist yet at this step
                for j in np.flatnonzero(vis[t][i]):
                    tokens.append((t, int(j)))
            key = tuple(tokens)
            groups.setdefault(key, []).append(i)
            token_sets[key] = tokens
        out = {}
        for key, members in groups.items():
            tokens = token_sets[key]
            T = len(tokens)
            token_states = np.stack([states[t][j] for t, j in tokens])
            token_positions = np.array([positions[t] for t, _ in tokens], dtype=np.intp)
            allow = np.zeros((T, T), dtype=bool)
            for a, (ta, ua) in enumerate(tokens):
                for b, (tb, jb) in enumerate(tokens):
                    if tb > ta:
                        continue
                    nt = states[tb].shape[0]
                    allow[a, b] = (ua < nt) and vis[tb][ua, jb]
                allow[a, a] = True
            with numeric.no_grad():
                h = model.forward_tokens(self.params, self.cfg, token_states,
                                         token_positions, allow)
                final = {j: pos for pos, (t, j) in enumerate(tokens) if t == L_eff - 1}
                for i in members:
                    recv_tokens = [final.get(j, -1) for j in range(n)]
                    present = [p for p in recv_tokens if p >= 0]
                    logits = model.combined_logits(
                        self.params, h, np.array([final[i]], dtype=np.intp),
                        np.array([present], dtype=np.intp)).data[0]
                    interactive = np.zeros(n)
                    k = 0
                    for j in range(n):
                        if recv_tokens[j] >= 0:
                            interactive[j] = logits[K_INTR + k]
                            k += 1
                    out[i] = self._gar(w, i, logits[:K_INTR], interactive)
        return out

    def _gar(self, w, i, intrinsic, interactive) -> model.GarLogits:
        return model.GarLogits(intrinsic=np.asarray(intrinsic, dtype=np.float64),
                               interactive=np.asarray(interactive, dtype=np.float64),
                               availability=arena.available_actions(w, i))


class ScriptedController:
    """Wraps one of the arena's scripted policies as a controller."""

    POLICIES = {
        "expert": arena.expert_policy,
        "partner": arena.partner_policy,
        "enemy_script": arena.enemy_policy,
    }

    def __init__(self, policy: str = "expert"):
        self._policy = self.POLICIES[policy]

    def reset(self):
        pass

    def observe(self, w):
        pass

    def act(self, w, agents=None) -> dict:
        if agents is None:
            agents = [i for i in range(w.n_units) if w.team[i]]
        return {i: (self._policy(w, i) if w.alive[i] else arena.NOOP) for i in agents}


class MixedController:
    """First `n_model` ally indices run on the model, the rest on a script."""

    def __init__(self, model_controller, partner_controller, n_model: int):
        self.model_controller = model_controller
        self.partner_controller = partner_controller
        self.n_model = n_model

    def reset(self):
        self.model_controller.reset()
        self.partner_controller.reset()

    def observe(self, w):
        self.model_controller.observe(w)
        self.partner_controller.observe(w)

    def act(self, w, agents=None) -> dict:
        allies = [i for i in range(w.n_units) if w.team[i]]
        mine = [i for i in allies if i < self.n_model]
        theirs = [i for i in allies if i >= self.n_model]
        actions = self.model_controller.act(w, mine) if mine else {}
        actions.update(self.partner_controller.act(w, theirs))
        return actions


def build_controller(spec: dict):
    kind = spec["kind"]
    if kind == "team":
        return TeamController(model.params_from_numpy(spec["params"]),
                              model.model_config_from_dict(spec["config"]),
                              mode=spec.get("mode", "central"),
                              select=spec.get("select", "argmax"))
    if kind == "scripted":
        return ScriptedController(spec.get("policy", "expert"))
    if kind == "mixed":
        return MixedController(build_controller(spec["model"]),
                               build_controller(spec["partner"]),
                               spec["n_model"])
    if kind == "solo":
        from . import baseline
        return baseline.SoloController(model.params_from_numpy(spec["params"]),
                                       baseline.solo_config_from_dict(spec["config"]))
    raise EvalError(f"unknown controller kind {kind!r}")


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class EpisodeOutcome:
    outcome: str
    steps: int
    inserted: bool = False
    forced_actions: list = field(default_factory=list)


def run_episode(cfg: ScenarioConfig, controller, env_seed: int,
                malfunction_step: int | None = None,
                insert_step: int | None = None,
                insert_type: str = "fighter") -> EpisodeOutcome:
    w = arena.reset(cfg.with_seed(env_seed))
    controller.reset()
    frozen = -1
    insert_pending = insert_step is not None
    insert_done = False
    forced = []
    while arena.terminal(w) == "ongoing":
        if insert_pending and w.t >= insert_step:
            cell = arena.free_cell_near_centroid(w, team=True)
            if cell is not None:
                w = arena.insert_unit(w, insert_type, True, cell)
                insert_done = True
            insert_pending = False
        controller.observe(w)
        actions = controller.act(w)
        if malfunction_step is not None and frozen < 0 and w.t >= malfunction_step:
            allies = [i for i in range(w.n_units) if w.alive[i] and w.team[i]]
            frozen = min(allies) if allies else -2
        if frozen >= 0 and w.alive[frozen]:
            actions[frozen] = arena.STOP
            forced.append((w.t, frozen))
        for i in range(w.n_units):
            if w.alive[i] and not w.team[i]:
                actions[i] = arena.enemy_policy(w, i)
        actions = {i: a for i, a in actions.items() if w.alive[i] or a == arena.NOOP}
        w, _ = arena.step(w, actions)
    return EpisodeOutcome(outcome=arena.terminal(w), steps=w.t,
                          inserted=insert_done, forced_actions=forced)


def _run_seed_batch(args):
    (cfg, controller_spec, seed_idx, episodes, base_seed,
     malfunction_step, insert_step, insert_type) = args
    controller = build_controller(controller_spec)
    outcomes = []
    for e in range(episodes):
        res = run_episode(cfg, controller, episode_seed(base_seed, seed_idx, e),
                          malfunction_step=malfunction_step,
                          insert_step=insert_step, insert_type=insert_type)
        outcomes.append(res.outcome)
    return seed_idx, outcomes


def evaluate(controller_spec: dict, cfg: ScenarioConfig, mode: str | None = None,
             episodes: int = 32, seeds: int = 4, base_seed: int = 0,
             workers: int | None = None, malfunction_step: int | None = None,
             insert_step: int | None = None, insert_type: str = "fighter",
             meta: dict | None = None) -> EvalReport:
    """Win rate over `episodes` rollouts for each of `seeds` seeds.

    Draws (and timeouts) count as non-wins. The per-seed win rates are
    aggregated as mean +/- standard deviation.
    """
    if mode is not None and controller_spec.get("kind") == "team":
        controller_spec = {**controller_spec, "mode": mode}
    tasks = [(cfg, controller_spec, s, episodes, base_seed,
              malfunction_step, insert_step, insert_type) for s in range(seeds)]
    nworkers = worker_count() if workers is None else max(1, workers)
    results = {}
    if nworkers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(nworkers, len(tasks))) as pool:
            for seed_idx, outcomes in pool.map(_run_seed_batch, tasks):
                results[seed_idx] = outcomes
    else:
        for task in tasks:
            seed_idx, outcomes = _run_seed_batch(task)
            results[seed_idx] = outcomes
    outcomes = [results[s] for s in range(seeds)]
    per_seed = [sum(o == "win" for o in seed_outcomes) / episodes
                for seed_outcomes in outcomes]
    report_mode = mode or controller_spec.get("mode", controller_spec.get("kind", "?"))
    return EvalReport(scenario_id=cfg.scenario_id, mode=report_mode,
                      episodes=episodes, seeds=seeds,
                      win_rate_mean=float(np.mean(per_seed)),
                      win_rate_std=float(np.std(per_seed)),
                      per_seed=per_seed, outcomes=outcomes, meta=meta or {})


def evaluate_suite(controller_spec: dict, scenarios, mode: str | None = None,
                   episodes: int = 32, seeds: int = 4, base_seed: int = 0,
                   workers: int | None = None) -> list[EvalReport]:
    return [evaluate(controller_spec, cfg, mode=mode, episodes=episodes, seeds=seeds,
                     base_seed=base_seed, workers=workers) for cfg in scenarios]


def team_spec(params, cfg: model.ModelConfig, mode: str = "central",
              select: str = "argmax") -> dict:
    arrays = params if all(isinstance(v, np.ndarray) for v in params.values()) \
        else model.params_numpy(params)
    return {"kind": "team", "params": arrays, "config": cfg.__dict__,
            "mode": mode, "select": select}


# ---------------------------------------------------------------------------
# downstream protocols
# ---------------------------------------------------------------------------

COLLAB_SCENARIO = "2t3f1h_v_6f"
MALFUNCTION_SCENARIO = "3f1t1h_v_5f"
MALFUNCTION_MAX_STEPS = 20
ADHOC_PARENT_SCENARIO = "3f1t1h_v_5f"
ADHOC_BASE = ("1t3f_v_5f", "1t3f", "5f")   # the parent minus its healer
ADHOC_INSERT_TYPE = "healer"
ADHOC_MAX_STEPS = 40
PROTOCOL_FRACTIONS = (0.2, 0.4, 0.6, 0.8)
COLLAB_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


def malfunction_scenario() -> ScenarioConfig:
    cfg = arena.scenario_by_id(MALFUNCTION_SCENARIO)
    return replace(cfg, max_steps=MALFUNCTION_MAX_STEPS)


def adhoc_scenario() -> ScenarioConfig:
    sid, ally, enemy = ADHOC_BASE
    return arena.make_scenario(sid, ally, enemy, max_steps=ADHOC_MAX_STEPS)


def run_varied_policies(params, model_cfg, scenario: ScenarioConfig | None = None,
                        fractions=COLLAB_FRACTIONS, mode: str = "strict",
                        episodes: int = 32, seeds: int = 4, base_seed: int = 0,
                        workers: int | None = None) -> list[EvalReport]:
    """First ceil(rho * M) allies on the model, the rest on the partner script."""
    cfg = scenario or arena.scenario_by_id(COLLAB_SCENARIO)
    m_total = cfg.n_controllable
    t_spec = team_spec(params, model_cfg, mode=mode)
    reports = []
    for rho in fractions:
        n_model = int(np.ceil(rho * m_total))
        spec = {"kind": "mixed", "model": t_spec,
                "partner": {"kind": "scripted", "policy": "partner"},
                "n_model": n_model}
        reports.append(evaluate(spec, cfg, episodes=episodes, seeds=seeds,
                                base_seed=base_seed, workers=workers,
                                meta={"rho": rho, "n_model": n_model, "mode": mode}))
    return reports


def run_ally_malfunction(params, model_cfg, scenario: ScenarioConfig | None = None,
                         fractions=PROTOCOL_FRACTIONS, mode: str = "strict",
                         episodes: int = 32, seeds: int = 4, base_seed: int = 0,
                         workers: int | None = None) -> list[EvalReport]:
    """Freeze the lowest-index living ally from step floor(f * max_steps) on.

    The first report (meta f = None) is the unmodified baseline.
    """
    cfg = scenario or malfunction_scenario()
    spec = team_spec(params, model_cfg, mode=mode)
    reports = [evaluate(spec, cfg, episodes=episodes, seeds=seeds, base_seed=base_seed,
                        workers=workers, meta={"f": None, "mode": mode})]
    for f in fractions:
        step_at = int(np.floor(f * cfg.max_steps))
        reports.append(evaluate(spec, cfg, episodes=episodes, seeds=seeds,
                                base_seed=base_seed, workers=workers,
                                malfunction_step=step_at,
                                meta={"f": f, "malfunction_step": step_at, "mode": mode}))
    return reports


def run_adhoc_teamplay(params, model_cfg, scenario: ScenarioConfig | None = None,
                       fractions=PROTOCOL_FRACTIONS, insert_type: str = ADHOC_INSERT_TYPE,
                       mode: str = "strict", episodes: int = 32, seeds: int = 4,
                       base_seed: int = 0, workers: int | None = None) -> list[EvalReport]:
    """Insert one ally near the team centroid at floor(f * max_steps).

    The first report (meta f = None) is the no-insert floor on the
    under-manned scenario.
    """
    cfg = scenario or adhoc_scenario()
    spec = team_spec(params, model_cfg, mode=mode)
    reports = [evaluate(spec, cfg, episodes=episodes, seeds=seeds, base_seed=base_seed,
                        workers=workers, meta={"f": None, "mode": mode})]
    for f in fractions:
        step_at = int(np.floor(f * cfg.max_steps))
        reports.append(evaluate(spec, cfg, episodes=episodes, seeds=seeds,
                                base_seed=base_seed, workers=workers,
                                insert_step=step_at, insert_type=insert_type,
                                meta={"f": f, "insert_step": step_at,
                                      "insert_type": insert_type, "mode": mode}))
    return reports


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def write_reports_jsonl(path, reports) -> None:
    import json
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict()) + "\n")


def write_table(path, rows, columns) -> None:
    """Plot-ready tab-separated columns with a header line."""
    with open(path, "w") as f:
        f.write("\t".join(columns) + "\n")
        for row in rows:
            f.write("\t".join(str(row[c]) for c in columns) + "\n")


def summarize(reports) -> str:
    lines = [f"{'scenario':18s} {'mode':8s} {'win rate':>9s} {'std':>6s}"]
    for r in reports:
        lines.append(f"{r.scenario_id:18s} {r.mode:8s} {100 * r.win_rate_mean:8.2f}% "
                     f"{100 * r.win_rate_std:5.2f}")
    mean = float(np.mean([r.win_rate_mean for r in reports])) if reports else 0.0
    lines.append(f"{'MEAN':18s} {'':8s} {100 * mean:8.2f}%")
    return "\n".join(lines)
