"""Supervised pretraining with the mask-based attention regime.

Each training window gets its own attention mask: the block-causal base is
either used as-is ("none"), thinned at a fixed or per-window-uniform ratio
("fixed" / "random"), or replaced by the recorded visibility ("local").
Pad/absent token slots are always cut out on top. RMSProp with decoupled
weight decay, no learning-rate schedule.

Metrics stream to an append-only JSONL file: one {"step", "loss", "accuracy"}
record per step, plus {"event": "eval", ...} records at the evaluation
cadence.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import data, evaluation, masks, model, numeric


MASK_MODES = ("none", "fixed", "random", "local")


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 32
    total_steps: int = 6000
    mask_mode: str = "random"
    mask_ratio: float = 0.5          # only for mask_mode == "fixed"
    rms_smoothing: float = 0.99
    rms_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0              # 0 disables periodic evaluation
    eval_episodes: int = 8
    eval_seeds: int = 2
    eval_mode: str = "strict"
    log_every: int = 10

    def validate(self) -> None:
        if self.mask_mode not in MASK_MODES:
            raise TrainError(f"mask mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.mask_mode == "fixed" and not 0.0 <= self.mask_ratio <= 1.0:
            raise TrainError(f"fixed mask ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.batch_size < 1 or self.total_steps < 0:
            raise TrainError("batch_size must be >= 1 and total_steps >= 0")


def parse_mask_mode(text: str) -> tuple[str, float]:
    """CLI syntax: none | random | local | fixed:<ratio> (bare ratio ok too)."""
    t = text.strip().lower()
    if t in ("none", "random", "local"):
        return t, 0.5
    if t.startswith("fixed:"):
        return "fixed", float(t.split(":", 1)[1])
    try:
        return "fixed", float(t)
    except ValueError:
        raise TrainError(f"cannot parse mask mode {text!r}") from None


class RmsProp:
    """RMSProp with decoupled weight decay (decay applied directly to weights)."""

    def __init__(self, params: dict, lr: float = 1e-4, smoothing: float = 0.99,
                 eps: float = 1e-8, weight_decay: float = 1e-5):
        self.params = params
        self.lr = lr
        self.smoothing = smoothing
        self.eps = eps
        self.weight_decay = weight_decay
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        a = self.smoothing
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.v[k] = a * self.v[k] + (1.0 - a) * g * g
            p.data -= self.lr * g / (np.sqrt(self.v[k]) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data


def window_mask(win: data.TrainingWindow, mode: str, ratio: float,
                rng: np.random.Generator, L: int) -> tuple[np.ndarray, float | None]:
    """The attention mask for one window; returns (allow, drawn ratio or None)."""
    base = masks.build_base_mask(L, win.n_units)
    drawn = None
    if mode == "none":
        m = base
    elif mode == "fixed":
        drawn = ratio
        m = masks.sample_training_mask(base, ratio, rng)
    elif mode == "random":
        drawn = masks.sample_ratio(rng)
        m = masks.sample_training_mask(base, drawn, rng)
    elif mode == "local":
        m = masks.build_local_mask(
            masks.VisibilitySet(L, win.n_units, win.visible), L, win.n_units)
    else:
        raise TrainError(f"unknown mask mode {mode!r}")
    return masks.exclude_tokens(m, win.absent).allow, drawn


def train_step(params: dict, opt: RmsProp, windows, model_cfg: model.ModelConfig,
               cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One optimizer update over a batch of windows; returns step metrics."""
    L = model_cfg.context_len
    positions = np.arange(L)
    losses = []
    n_correct = 0
    n_terms = 0
    ratios = []
    for win in windows:
        allow, drawn = window_mask(win, cfg.mask_mode, cfg.mask_ratio, rng, L)
        if drawn is not None:
            ratios.append(drawn)
        loss, correct = model.imitation_loss(params, model_cfg, win.states, allow,
                                             win.targets, win.include, positions)
        losses.append(loss)
        n_correct += int(correct.sum())
        n_terms += len(correct)
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    total = total * (1.0 / len(losses))
    loss_value = float(total.data)
    if not np.isfinite(loss_value):
        raise TrainError(f"non-finite loss {loss_value}")
    opt.zero_grad()
    total.backward()
    opt.step()
    return {"loss": loss_value, "accuracy": n_correct / max(n_terms, 1),
            "terms": n_terms, "mean_ratio": float(np.mean(ratios)) if ratios else None}


def train(ds: data.Dataset, model_cfg: model.ModelConfig, cfg: TrainConfig,
          out_dir, eval_scenarios=None, resume_from=None, workers=None,
          progress=None):
    """Full pretraining run; writes metrics.jsonl, best.ckpt, final.ckpt.

    Returns (params, history list of metric dicts). Deterministic given
    cfg.seed (evaluation episodes are individually seeded, so the worker
    count does not change results).
    """
    cfg.validate()
    model_cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    root = np.random.SeedSequence(cfg.seed)
    init_ss, sample_ss = root.spawn(2)
    start_step = 0
    if resume_from is not None:
        params, config, extra = model.load_checkpoint(resume_from)
        start_step = int(extra.get("step", 0))
    else:
        params = model.init_params(model_cfg, np.random.default_rng(init_ss))
    opt = RmsProp(params, lr=cfg.learning_rate, smoothing=cfg.rms_smoothing,
                  eps=cfg.rms_eps, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(sample_ss)
    if eval_scenarios is None:
        eval_scenarios = [ds.scenarios[sid] for sid in ds.scenario_order]
    history = []
    best_win = -1.0
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    t0 = time.time()
    with open(metrics_path, "a") as metrics_f:
        for step in range(start_step, start_step + cfg.total_steps):
            windows = data.sample_windows(ds, cfg.batch_size, model_cfg.context_len, rng)
            metrics = train_step(params, opt, windows, model_cfg, cfg, rng)
            metrics["step"] = step
            history.append(metrics)
            if cfg.log_every and (step % cfg.log_every == 0 or
                                  step == start_step + cfg.total_steps - 1):
                metrics_f.write(json.dumps(metrics) + "\n")
                metrics_f.flush()
            if progress and step % max(cfg.log_every, 1) == 0:
                progress(step, metrics)
            is_last = step == start_step + cfg.total_steps - 1
            if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or is_last):
                reports = evaluation.evaluate_suite(
                    evaluation.team_spec(params, model_cfg, mode=cfg.eval_mode),
                    eval_scenarios, episodes=cfg.eval_episodes,
                    seeds=cfg.eval_seeds, workers=workers)
                win = float(np.mean([r.win_rate_mean for r in reports]))
                record = {"step": step, "event": "eval", "mode": cfg.eval_mode,
                          "win_rate": win, "elapsed_s": round(time.time() - t0, 1)}
                metrics_f.write(json.dumps(record) + "\n")
                metrics_f.flush()
                history.append(record)
                if win >= best_win:
                    best_win = win
                    model.save_checkpoint(
                        os.path.join(out_dir, "best.ckpt"), params,
                        {"kind": "team", **model_cfg.__dict__},
                        {"step": step + 1, "win_rate": win,
                         "train_config": asdict(cfg)})
    model.save_checkpoint(os.path.join(out_dir, "final.ckpt"), params,
                          {"kind": "team", **model_cfg.__dict__},
                          {"step": start_step + cfg.total_steps,
                           "train_config": asdict(cfg)})
    if cfg.eval_every == 0 or not os.path.exists(os.path.join(out_dir, "best.ckpt")):
        model.save_checkpoint(os.path.join(out_dir, "best.ckpt"), params,
                              {"kind": "team", **model_cfg.__dict__},
                              {"step": start_step + cfg.total_steps,
                               "train_config": asdict(cfg)})
    return params, history
