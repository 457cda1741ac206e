"""Batch entry points: dataset generation, training, evaluation, ablation
sweeps, and the downstream protocols.

Every command writes a manifest (command, arguments, seed, version) to its
output directory before any other output, so a run is reproducible from the
manifest alone. Exit codes: 0 success, 2 validation error, 3 quality-gate
failure, 4 I/O error. The MASQUAD_WORKERS environment variable caps rollout
parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__, arena, baseline, data, evaluation, model, training

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_GATE = 3
EXIT_IO = 4

EXPERT_GATE = 0.90


class CliError(Exception):
    def __init__(self, message, code=EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def artifact_version() -> str:
    version = f"masquad-{__version__}"
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True,
            text=True, timeout=5, cwd=os.path.dirname(os.path.abspath(__file__)))
        if described.returncode == 0 and described.stdout.strip():
            version += f"+{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


def write_manifest(out_dir: str, command: str, args: argparse.Namespace) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "options": {k: v for k, v in vars(args).items() if k != "func"},
        "config_paths": [p for p in [getattr(args, "config", None)] if p],
        "seed": getattr(args, "seed", None),
        "out_dir": out_dir,
        "version": artifact_version(),
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Values from --config fill in every option left at its parser default."""
    if not getattr(args, "config", None):
        return
    try:
        with open(args.config) as f:
            overrides = json.load(f)
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}", EXIT_IO)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file is not valid JSON: {exc}")
    for key, value in overrides.items():
        if not hasattr(args, key):
            raise CliError(f"config file sets unknown option {key!r}")
        if getattr(args, key) == parser.get_default(key):
            setattr(args, key, value)


def resolve_scenarios(token: str) -> list[arena.ScenarioConfig]:
    out = []
    for part in token.split(","):
        part = part.strip()
        if not part:
            continue
        if part == "training":
            out.extend(arena.training_scenarios())
        elif part == "heldout":
            out.extend(arena.heldout_scenarios())
        elif part == "all":
            out.extend(arena.training_scenarios())
            out.extend(arena.heldout_scenarios())
        elif os.path.exists(part):
            try:
                out.append(arena.scenario_from_text(open(part).read()))
            except arena.ScenarioFormatError as exc:
                raise CliError(f"{part}: {exc}")
        else:
            try:
                out.append(arena.scenario_by_id(part))
            except arena.ArenaError as exc:
                raise CliError(str(exc))
    if not out:
        raise CliError(f"no scenarios selected by {token!r}")
    return out


def load_team_checkpoint(path):
    try:
        params, config, extra = model.load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO)
    kind = config.get("kind", "team")
    if kind == "team":
        return "team", params, model.model_config_from_dict(config), extra
    if kind == "solo":
        return "solo", params, baseline.solo_config_from_dict(config), extra
    raise CliError(f"unknown checkpoint kind {kind!r}")


def controller_spec_for(kind, params, cfg, mode):
    if kind == "team":
        return evaluation.team_spec(params, cfg, mode=mode)
    if mode == "central":
        raise CliError("the per-agent baseline runs decentralized only")
    return baseline.solo_spec(params, cfg)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, parser):
    scenarios = resolve_scenarios(args.scenarios)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_manifest(out_dir, "gen-data", args)
    scenario_map = {c.scenario_id: c for c in scenarios}
    if len(scenario_map) != len(scenarios):
        raise CliError("duplicate scenario ids in selection")
    win_rates = {}

    def episode_stream():
        for idx, cfg in enumerate(sorted(scenario_map.values(), key=lambda c: c.scenario_id)):
            rng = np.random.default_rng(
                np.random.SeedSequence([args.seed, idx]))
            wins = 0
            for _ in range(args.episodes):
                rec = data.record_episode(cfg, arena.expert_policy, rng)
                wins += rec.outcome == "win"
                yield rec
            win_rates[cfg.scenario_id] = wins / args.episodes

    try:
        count = data.write_dataset(args.out, episode_stream(), scenario_map)
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_IO)
    failed = []
    for sid in sorted(win_rates):
        flag = "" if win_rates[sid] >= EXPERT_GATE else "  << below gate"
        print(f"{sid:18s} expert win rate {win_rates[sid]:6.2%}{flag}")
        if win_rates[sid] < EXPERT_GATE:
            failed.append(sid)
    print(f"wrote {count} episodes to {args.out}")
    if failed:
        os.remove(args.out)
        print(f"expert gate failed (< {EXPERT_GATE:.0%}) on: {', '.join(failed)}; "
              "dataset removed", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def _model_config(args) -> model.ModelConfig:
    cfg = model.paper_preset() if args.preset == "paper" else model.desk_preset()
    if args.timestep:
        cfg = dataclasses.replace(cfg, context_len=args.timestep)
    return cfg


def _train_config(args, mask_mode, mask_ratio) -> training.TrainConfig:
    return training.TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay,
        batch_size=args.batch_size, total_steps=args.steps,
        mask_mode=mask_mode, mask_ratio=mask_ratio, seed=args.seed,
        eval_every=args.eval_every, eval_episodes=args.eval_episodes,
        eval_seeds=args.eval_seeds)


def cmd_train(args, parser):
    write_manifest(args.out, "train", args)
    mask_mode, mask_ratio = training.parse_mask_mode(args.mask_mode)
    try:
        ds = data.Dataset(args.dataset)
    except OSError as exc:
        raise CliError(f"cannot open dataset: {exc}", EXIT_IO)
    with ds:
        def progress(step, metrics):
            print(f"step {step:6d} loss {metrics['loss']:.4f} "
                  f"acc {metrics['accuracy']:.3f}", flush=True)

        if args.arch == "solo":
            solo_cfg = baseline.from_team_preset(_model_config(args), n_max=args.n_max)
            baseline.train_solo(ds, solo_cfg, _train_config(args, mask_mode, mask_ratio),
                                args.out, progress=progress if args.verbose else None)
        else:
            training.train(ds, _model_config(args),
                           _train_config(args, mask_mode, mask_ratio), args.out,
                           resume_from=args.resume, workers=args.workers,
                           progress=progress if args.verbose else None)
    print(f"checkpoints and metrics written under {args.out}")
    return EXIT_OK


def cmd_eval(args, parser):
    write_manifest(args.out, "eval", args)
    kind, params, cfg, _ = load_team_checkpoint(args.checkpoint)
    scenarios = resolve_scenarios(args.scenarios)
    mode = {"central": "central", "strict": "strict", "fast": "fast"}[args.mode]
    spec = controller_spec_for(kind, params, cfg, mode)
    reports = []
    for scen in scenarios:
        rep = evaluation.evaluate(spec, scen, mode=mode if kind == "team" else None,
                                  episodes=args.episodes, seeds=args.seeds,
                                  base_seed=args.seed, workers=args.workers)
        reports.append(rep)
        print(f"{scen.scenario_id:18s} {mode:8s} win rate "
              f"{rep.win_rate_mean:6.2%} +- {rep.win_rate_std:.2%}", flush=True)
    evaluation.write_reports_jsonl(os.path.join(args.out, "reports.jsonl"), reports)
    with open(os.path.join(args.out, "summary.txt"), "w") as f:
        f.write(evaluation.summarize(reports) + "\n")
    print(evaluation.summarize(reports))
    return EXIT_OK


def _train_and_eval_cell(ds, scenarios, args, mask_mode, mask_ratio, timestep,
                         eval_scenarios, modes, label):
    mcfg = dataclasses.replace(model.desk_preset(), context_len=timestep)
    tcfg = training.TrainConfig(
        batch_size=args.batch_size, total_steps=args.steps,
        mask_mode=mask_mode, mask_ratio=mask_ratio, seed=args.seed)
    run_dir = os.path.join(args.out, f"run_{label}")
    params, _ = training.train(ds, mcfg, tcfg, run_dir, workers=args.workers)
    cell = {}
    for mode in modes:
        reports = evaluation.evaluate_suite(
            evaluation.team_spec(params, mcfg, mode=mode), eval_scenarios,
            episodes=args.episodes, seeds=args.seeds, base_seed=args.seed,
            workers=args.workers)
        cell[mode] = (float(np.mean([r.win_rate_mean for r in reports])),
                      float(np.mean([r.win_rate_std for r in reports])))
        evaluation.write_reports_jsonl(
            os.path.join(args.out, f"reports_{label}_{mode}.jsonl"), reports)
    return cell


def cmd_ablate(args, parser):
    write_manifest(args.out, "ablate", args)
    try:
        ds = data.Dataset(args.dataset)
    except OSError as exc:
        raise CliError(f"cannot open dataset: {exc}", EXIT_IO)
    with ds:
        train_scens = [ds.scenarios[sid] for sid in ds.scenario_order]
        rows = []
        if args.which == "mask_ratio":
            cells = [("none", "none", 0.0), ("0.2", "fixed", 0.2), ("0.5", "fixed", 0.5),
                     ("0.8", "fixed", 0.8), ("local", "local", 0.0), ("random", "random", 0.0)]
            for label, mode, ratio in cells:
                cell = _train_and_eval_cell(ds, train_scens, args, mode, ratio,
                                            args.timestep or 5, train_scens,
                                            ("central", "strict"), f"mask_{label}")
                rows.append({"mask_mode": label,
                             "central_win": round(cell["central"][0], 4),
                             "central_std": round(cell["central"][1], 4),
                             "strict_win": round(cell["strict"][0], 4),
                             "strict_std": round(cell["strict"][1], 4)})
                print(f"mask {label:8s} central {cell['central'][0]:.2%} "
                      f"strict {cell['strict'][0]:.2%}", flush=True)
            evaluation.write_table(os.path.join(args.out, "mask_ratio.tsv"), rows,
                                   ["mask_mode", "central_win", "central_std",
                                    "strict_win", "strict_std"])
        elif args.which == "timestep":
            for L in (1, 3, 5, 10):
                cell = _train_and_eval_cell(ds, train_scens, args, "random", 0.0, L,
                                            train_scens, ("strict",), f"L{L}")
                rows.append({"timestep": L, "strict_win": round(cell["strict"][0], 4),
                             "strict_std": round(cell["strict"][1], 4)})
                print(f"timestep {L} strict {cell['strict'][0]:.2%}", flush=True)
            evaluation.write_table(os.path.join(args.out, "timestep.tsv"), rows,
                                   ["timestep", "strict_win", "strict_std"])
        elif args.which == "map_count":
            heldout = arena.heldout_scenarios()
            for k in (2, 4, 6, 8):
                ids = ds.scenario_order[:k]
                view = data.DatasetView(ds, ids)
                mcfg = dataclasses.replace(model.desk_preset(),
                                           context_len=args.timestep or 5)
                tcfg = training.TrainConfig(batch_size=args.batch_size,
                                            total_steps=args.steps,
                                            mask_mode="random", seed=args.seed)
                run_dir = os.path.join(args.out, f"run_maps{k}")
                params, _ = training.train(view, mcfg, tcfg, run_dir,
                                           workers=args.workers)
                reports = evaluation.evaluate_suite(
                    evaluation.team_spec(params, mcfg, mode="strict"), heldout,
                    episodes=args.episodes, seeds=args.seeds, base_seed=args.seed,
                    workers=args.workers)
                win = float(np.mean([r.win_rate_mean for r in reports]))
                rows.append({"training_scenarios": k, "zero_shot_strict_win": round(win, 4)})
                print(f"maps {k} zero-shot strict {win:.2%}", flush=True)
            evaluation.write_table(os.path.join(args.out, "map_count.tsv"), rows,
                                   ["training_scenarios", "zero_shot_strict_win"])
        else:
            raise CliError(f"unknown ablation {args.which!r}")
    return EXIT_OK


def cmd_downstream(args, parser):
    write_manifest(args.out, "downstream", args)
    kind, params, cfg, _ = load_team_checkpoint(args.checkpoint)
    if kind != "team":
        raise CliError("downstream protocols need a team checkpoint")
    common = dict(episodes=args.episodes, seeds=args.seeds, base_seed=args.seed,
                  workers=args.workers, mode=args.mode)
    if args.task == "collab":
        reports = evaluation.run_varied_policies(params, cfg, **common)
        rows = [{"rho": r.meta["rho"], "win": round(r.win_rate_mean, 4),
                 "std": round(r.win_rate_std, 4)} for r in reports]
        columns = ["rho", "win", "std"]
    elif args.task == "malfunction":
        reports = evaluation.run_ally_malfunction(params, cfg, **common)
        rows = [{"f": r.meta["f"] if r.meta["f"] is not None else "none",
                 "win": round(r.win_rate_mean, 4), "std": round(r.win_rate_std, 4)}
                for r in reports]
        columns = ["f", "win", "std"]
    elif args.task == "adhoc":
        reports = evaluation.run_adhoc_teamplay(params, cfg, **common)
        rows = [{"f": r.meta["f"] if r.meta["f"] is not None else "none",
                 "win": round(r.win_rate_mean, 4), "std": round(r.win_rate_std, 4)}
                for r in reports]
        columns = ["f", "win", "std"]
    else:
        raise CliError(f"unknown downstream task {args.task!r}")
    evaluation.write_reports_jsonl(os.path.join(args.out, f"{args.task}.jsonl"), reports)
    evaluation.write_table(os.path.join(args.out, f"{args.task}.tsv"), rows, columns)
    for row in rows:
        print("  ".join(f"{c}={row[c]}" for c in columns))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masquad",
        description="Masked-attention multi-agent imitation learning on a grid arena")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON file of option defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--workers", type=int, default=None,
                       help=f"rollout workers (default ${evaluation.WORKERS_ENV_VAR} or cpu count)")

    p = sub.add_parser("gen-data", help="record expert datasets")
    p.add_argument("--scenarios", default="training")
    p.add_argument("--episodes", type=int, default=2000, help="episodes per scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain a model")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", choices=("team", "solo"), default="team")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--mask-mode", default="random",
                   help="none | random | local | fixed:<ratio>")
    p.add_argument("--timestep", type=int, default=0, help="context length override")
    p.add_argument("--steps", type=int, default=6000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--eval-episodes", type=int, default=8)
    p.add_argument("--eval-seeds", type=int, default=2)
    p.add_argument("--n-max", type=int, default=20, help="solo baseline slot count")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="measure win rates")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios", default="training")
    p.add_argument("--mode", choices=("central", "strict", "fast"), default="strict")
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--seeds", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--which", choices=("mask_ratio", "timestep", "map_count"),
                   required=True)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--timestep", type=int, default=0)
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--seeds", type=int, default=4)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("downstream", help="run a downstream protocol")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("collab", "malfunction", "adhoc"), required=True)
    p.add_argument("--mode", choices=("central", "strict", "fast"), default="strict")
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--seeds", type=int, default=4)
    p.set_defaults(func=cmd_downstream)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_config_file(args, parser)
        return args.func(args, parser)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (arena.ArenaError, data.DatasetError, model.ModelError,
            model.CheckpointError, training.TrainError,
            baseline.BaselineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
