"""Per-agent baseline with a fixed-size action head.

The contrast case for the team network: each agent runs its own causal
transformer over its private observation history. An observation is the
visible units' feature vectors written into a fixed table of N_max slots in
unit-index order (invisible and nonexistent slots zeroed), and the action
head has a fixed K_intr + N_max output width with unavailable slots muted at
selection time. Slot j of the head always means "interact with unit j", so
its meaning shifts whenever the unit count changes — exactly the
generalization weakness this baseline exists to expose.

Shares the team model's trunk dimensions, optimizer, and training budget;
evaluated decentralized only.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import arena, data, masks, model, numeric
from .arena import D_STATE, K_INTR
from .numeric import Tensor, cross_entropy, matmul, mean


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class SoloConfig:
    n_max: int = 20            # largest unit count anywhere plus insertion headroom
    n_blocks: int = 2
    d_hidden: int = 64
    n_heads: int = 4
    context_len: int = 5
    d_state: int = D_STATE
    k_intr: int = K_INTR

    @property
    def obs_width(self) -> int:
        return self.n_max * self.d_state

    @property
    def n_actions(self) -> int:
        return self.k_intr + self.n_max


def solo_config_from_dict(d: dict) -> SoloConfig:
    return SoloConfig(**{k: v for k, v in d.items() if k != "kind"})


def from_team_preset(team_cfg: model.ModelConfig, n_max: int = 20) -> SoloConfig:
    """Same trunk hyperparameters as the team model (shared table of settings)."""
    return SoloConfig(n_max=n_max, n_blocks=team_cfg.n_blocks,
                      d_hidden=team_cfg.d_hidden, n_heads=team_cfg.n_heads,
                      context_len=team_cfg.context_len, d_state=team_cfg.d_state,
                      k_intr=team_cfg.k_intr)


def _trunk_config(cfg: SoloConfig) -> model.ModelConfig:
    return model.ModelConfig(n_blocks=cfg.n_blocks, d_hidden=cfg.d_hidden,
                             n_heads=cfg.n_heads, context_len=cfg.context_len,
                             d_state=cfg.obs_width, k_intr=cfg.k_intr)


def init_solo_params(cfg: SoloConfig, rng: np.random.Generator) -> dict:
    p = model.init_params(_trunk_config(cfg), rng)
    for name in ("head.w_intr", "head.b_intr", "head.w_exec", "head.w_recv", "head.b_pair"):
        del p[name]
    p["solo_head.w"] = Tensor(rng.normal(0.0, 0.02, size=(cfg.d_hidden, cfg.n_actions)),
                              requires_grad=True)
    p["solo_head.b"] = Tensor(np.zeros(cfg.n_actions), requires_grad=True)
    return p


def solo_observation(states: np.ndarray, visible_row: np.ndarray, n_max: int) -> np.ndarray:
    """Visible units' features in index order, zero-padded to n_max slots."""
    n = states.shape[0]
    if n > n_max:
        raise BaselineError(f"scenario has {n} units, baseline supports at most {n_max}")
    obs = np.zeros((n_max, states.shape[1]))
    vis = np.asarray(visible_row, dtype=bool)
    obs[:n][vis] = states[vis]
    return obs.reshape(-1)


def forward_solo(params: dict, cfg: SoloConfig, obs_seq: np.ndarray,
                 positions: np.ndarray) -> Tensor:
    """Per-step action logits [L_eff, k_intr + n_max] for one agent's history."""
    L_eff = obs_seq.shape[0]
    allow = masks.build_base_mask(L_eff, 1).allow
    h = model.forward_tokens(params, _trunk_config(cfg), obs_seq, positions, allow)
    return matmul(h, params["solo_head.w"]) + params["solo_head.b"]


@dataclass
class SoloWindow:
    obs: np.ndarray        # [L, obs_width]
    targets: np.ndarray    # [L] int64, -1 = no loss
    include: np.ndarray    # [L] bool
    scenario_id: str
    agent: int


def build_solo_window(record: data.EpisodeRecord, end_step: int, agent: int,
                      L: int, cfg: SoloConfig) -> SoloWindow:
    obs = np.zeros((L, cfg.obs_width))
    targets = np.full(L, -1, dtype=np.int64)
    include = np.zeros(L, dtype=bool)
    for slot in range(L):
        t = end_step - (L - 1) + slot
        if t < 0:
            continue
        s = record.steps[t]
        if agent >= s.n_units:
            continue
        obs[slot] = solo_observation(s.states, s.visible[agent], cfg.n_max)
        if s.controllable[agent] and s.actions[agent] >= 0:
            targets[slot] = int(s.actions[agent])
            include[slot] = True
    return SoloWindow(obs=obs, targets=targets, include=include,
                      scenario_id=record.scenario_id, agent=agent)


def sample_solo_windows(ds: data.Dataset, batch_size: int, L: int,
                        cfg: SoloConfig, rng: np.random.Generator) -> list[SoloWindow]:
    """Uniform over (episode, end-step), then uniform over agents acting there."""
    cumulative = np.cumsum(ds.lengths)
    draws = rng.integers(0, int(cumulative[-1]), size=batch_size)
    out = []
    for r in draws:
        epi = int(np.searchsorted(cumulative, r, side="right"))
        end = int(r - (cumulative[epi - 1] if epi else 0))
        record = ds.episode(epi)
        s = record.steps[end]
        acting = np.flatnonzero(s.controllable & (s.actions >= 0))
        if len(acting) == 0:
            continue
        agent = int(rng.choice(acting))
        out.append(build_solo_window(record, end, agent, L, cfg))
    return out


def solo_loss(params: dict, cfg: SoloConfig, window: SoloWindow):
    if not window.include.any():
        raise BaselineError("solo window has no included steps")
    logits = forward_solo(params, cfg, window.obs, np.arange(cfg.context_len))
    rows = np.flatnonzero(window.include)
    picked = numeric.take_rows(logits, rows)
    tgt = window.targets[rows]
    loss = mean(cross_entropy(picked, tgt))
    correct = picked.data.argmax(axis=-1) == tgt
    return loss, correct


def train_solo(ds: data.Dataset, cfg: SoloConfig, train_cfg, out_dir,
               progress=None) -> tuple[dict, list]:
    """Same optimizer and budget as the team model; mask modes do not apply."""
    from .training import RmsProp, TrainError
    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence(train_cfg.seed)
    init_ss, sample_ss = root.spawn(2)
    params = init_solo_params(cfg, np.random.default_rng(init_ss))
    opt = RmsProp(params, lr=train_cfg.learning_rate, smoothing=train_cfg.rms_smoothing,
                  eps=train_cfg.rms_eps, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(sample_ss)
    history = []
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    t0 = time.time()
    with open(metrics_path, "a") as metrics_f:
        for step in range(train_cfg.total_steps):
            windows = sample_solo_windows(ds, train_cfg.batch_size,
                                          cfg.context_len, cfg, rng)
            losses = []
            n_correct = n_terms = 0
            for win in windows:
                loss, correct = solo_loss(params, cfg, win)
                losses.append(loss)
                n_correct += int(correct.sum())
                n_terms += len(correct)
            total = losses[0]
            for extra in losses[1:]:
                total = total + extra
            total = total * (1.0 / len(losses))
            if not np.isfinite(float(total.data)):
                raise TrainError(f"non-finite baseline loss at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            metrics = {"step": step, "loss": float(total.data),
                       "accuracy": n_correct / max(n_terms, 1)}
            history.append(metrics)
            if train_cfg.log_every and step % train_cfg.log_every == 0:
                metrics_f.write(json.dumps(metrics) + "\n")
                metrics_f.flush()
            if progress and step % max(train_cfg.log_every, 1) == 0:
                progress(step, metrics)
    model.save_checkpoint(os.path.join(out_dir, "final.ckpt"), params,
                          {"kind": "solo", **asdict(cfg)},
                          {"step": train_cfg.total_steps,
                           "train_config": asdict(train_cfg),
                           "elapsed_s": round(time.time() - t0, 1)})
    return params, history


class SoloController:
    """Per-agent decentralized execution of the baseline network."""

    def __init__(self, params: dict, cfg: SoloConfig,
                 select: str = "argmax", rng: np.random.Generator | None = None):
        self.params = params
        self.cfg = cfg
        self.select = select
        self.rng = rng
        self.reset()

    def reset(self):
        self._states_hist = []
        self._vis_hist = []

    def observe(self, w: arena.WorldState):
        if w.n_units > self.cfg.n_max:
            raise BaselineError(
                f"scenario has {w.n_units} units, baseline supports {self.cfg.n_max}")
        self._states_hist.append(arena.encode_state(w))
        self._vis_hist.append(arena.visibility(w))

    def act(self, w: arena.WorldState, agents=None) -> dict:
        if agents is None:
            agents = [i for i in range(w.n_units) if w.team[i]]
        L = self.cfg.context_len
        states = self._states_hist[-L:]
        vis = self._vis_hist[-L:]
        actions = {}
        with numeric.no_grad():
            for i in agents:
                if not w.alive[i]:
                    actions[i] = arena.NOOP
                    continue
                rows = []
                pos = []
                for t in range(len(states)):
                    if i >= states[t].shape[0]:
                        continue
                    rows.append(solo_observation(states[t], vis[t][i], self.cfg.n_max))
                    pos.append(L - len(states) + t)
                logits = forward_solo(self.params, self.cfg, np.stack(rows),
                                      np.array(pos, dtype=np.intp)).data[-1]
                avail = np.zeros(self.cfg.n_actions, dtype=bool)
                env_avail = arena.available_actions(w, i)
                avail[:len(env_avail)] = env_avail
                gar = model.GarLogits(intrinsic=logits[:self.cfg.k_intr],
                                      interactive=logits[self.cfg.k_intr:],
                                      availability=avail)
                actions[i] = model.select_action(gar, self.select, self.rng)
        return actions


def solo_spec(params, cfg: SoloConfig, select: str = "argmax") -> dict:
    arrays = params if all(isinstance(v, np.ndarray) for v in params.values()) \
        else model.params_numpy(params)
    return {"kind": "solo", "params": arrays, "config": asdict(cfg), "select": select}
