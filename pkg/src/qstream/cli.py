"""Command-line pipeline: generate traces, train the learner, evaluate
policies, and aggregate a report.

    qstream gen-traces --out runs/a --n-train 20 --n-test 20 --duration 120
    qstream train      --traces runs/a --scheme qddra --episodes 10000
    qstream evaluate   --traces runs/a --scheme qddra \
                       --checkpoint runs/a/drl_qddra.json
    qstream report     --inputs runs/a/sessions_qddra.csv ... --out runs/a

Every knob lives in an INI config (section.key) that the flags override;
`qstream config` prints the effective configuration. Exit codes: 0 success,
1 usage or configuration problem, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .abr import buffer_based, rate_based
from .channel import grid_topology, single_cell_topology
from .numerics import NumericsError
from .player import (
    DEFAULT_LADDER_BPS,
    ManifestError,
    PlayerError,
    VideoManifest,
    run_session,
    synth_manifest,
)
from .quality import RQParams
from .rl import (
    CheckpointError,
    SessionEnv,
    TrainConfig,
    learned_policy,
    load_checkpoint,
    save_checkpoint,
    train,
    write_curve,
)
from .tracegen import (
    MalformedTraceFile,
    Scenario,
    TraceError,
    make_split,
    read_trace,
)

__all__ = [
    "RunConfig",
    "ConfigError",
    "EmptyOrAllZero",
    "jain_fairness",
    "VIDEO_PROFILES",
    "SCENARIOS",
    "build_scenario",
    "user_profiles",
    "user_manifest",
    "main",
]


class ConfigError(ValueError):
    pass


class EmptyOrAllZero(ValueError):
    """Fairness is undefined for an empty or all-zero set of scores."""


def jain_fairness(values) -> Tuple[float, float]:
    """Jain's index of a set of nonnegative scores and the matching
    unfairness sqrt(1 - index). Equal shares score (1, 0)."""
    x = np.asarray(values, dtype=float)
    if x.size == 0 or not np.any(x > 0):
        raise EmptyOrAllZero("need at least one positive score")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("scores must be finite and nonnegative")
    index = float(x.sum() ** 2 / (x.size * np.sum(x * x)))
    return index, float(np.sqrt(max(1.0 - index, 0.0)))


# --- configuration -----------------------------------------------------------


@dataclass
class RunConfig:
    """Every tunable of the pipeline, INI-addressable as section.key."""

    # channel
    slot_s: float = 0.04
    doppler_hz: float = 10.0
    noise_power: float = 1.0
    snr_gap: float = 1.34
    bandwidth: float = 1e6
    speed_mps: float = 1.4
    move_period_s: float = 5.0
    power_budget: float = 4.0
    radius: float = 100.0
    min_radius: float = 10.0
    # allocation
    smoothing: float = 0.1
    solver_tol: float = 1e-4
    solver_max_iter: int = 100
    cadence_slots: int = 1
    # streaming
    chunk_duration_s: float = 2.0
    buffer_max_s: float = 30.0
    switch_penalty: float = 0.5
    rebuffer_penalty: float = 4.0
    chunk_count: int = 30
    size_jitter: float = 0.1
    quality_jitter: float = 0.05
    # multiplies every rung of the canonical bitrate ladder; lower it when
    # running low-power channels whose cell rates sit below the bottom rung
    ladder_scale: float = 1.0
    # learning
    episodes: int = 10000
    lr_actor: float = 1e-5
    lr_critic: float = 1e-4
    gamma: float = 0.99
    rollout: int = 8
    history: int = 8
    hidden: int = 64
    entropy_start: float = 0.5
    entropy_end: float = 0.01
    reward_scale: float = 60.0
    max_grad_norm: float = 40.0
    workers: int = 1
    # run
    scenario: str = "single_cell_siso"
    scheme: str = "qddra"
    seed: int = 0
    duration_s: int = 120
    n_train: int = 20
    n_test: int = 20


_SECTIONS: Dict[str, Tuple[str, ...]] = {
    "channel": (
        "slot_s",
        "doppler_hz",
        "noise_power",
        "snr_gap",
        "bandwidth",
        "speed_mps",
        "move_period_s",
        "power_budget",
        "radius",
        "min_radius",
    ),
    "allocation": ("smoothing", "solver_tol", "solver_max_iter", "cadence_slots"),
    "streaming": (
        "chunk_duration_s",
        "buffer_max_s",
        "switch_penalty",
        "rebuffer_penalty",
        "chunk_count",
        "size_jitter",
        "quality_jitter",
        "ladder_scale",
    ),
    "learning": (
        "episodes",
        "lr_actor",
        "lr_critic",
        "gamma",
        "rollout",
        "history",
        "hidden",
        "entropy_start",
        "entropy_end",
        "reward_scale",
        "max_grad_norm",
        "workers",
    ),
    "run": ("scenario", "scheme", "seed", "duration_s", "n_train", "n_test"),
}


def config_to_ini(cfg: RunConfig) -> str:
    lines: List[str] = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {getattr(cfg, key)!r}".replace("'", ""))
        lines.append("")
    return "\n".join(lines)


def config_from_ini(path) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = RunConfig()
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            kind = types[key]
            try:
                if kind in ("int", int):
                    value = int(raw)
                elif kind in ("float", float):
                    value = float(raw)
                else:
                    value = raw
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {raw!r}") from exc
            setattr(cfg, key, value)
    return cfg


# --- scenario presets ----------------------------------------------------------

# PSNR-like quality curves, fit for bitrates in bits/s
VIDEO_PROFILES: Dict[str, RQParams] = {
    "news": RQParams(4.2, 2e-2, 1.0),
    "film": RQParams(4.6, 1e-2, 1.0),
    "sports": RQParams(5.0, 5e-3, 1.0),
}

SCENARIOS = ("single_cell_siso", "multicell_mimo")


def user_profiles(scenario_name: str) -> List[RQParams]:
    """Per-user quality curves: one shared video for the single-cell setup,
    distinct videos round-robin inside each cell of the grid."""
    names = list(VIDEO_PROFILES)
    if scenario_name == "single_cell_siso":
        return [VIDEO_PROFILES["news"]] * 4
    if scenario_name == "multicell_mimo":
        out = []
        for cell in range(4):
            for slot in range(3):
                out.append(VIDEO_PROFILES[names[slot % len(names)]])
        return out
    raise ConfigError(f"unknown scenario {scenario_name!r}")


def build_scenario(cfg: RunConfig) -> Scenario:
    if cfg.scenario == "single_cell_siso":
        topo = single_cell_topology(
            n_users=4,
            n_tx=1,
            n_rx=1,
            power_budget=cfg.power_budget,
            radius=cfg.radius,
            min_radius=cfg.min_radius,
        )
    elif cfg.scenario == "multicell_mimo":
        topo = grid_topology(
            n_cells=4,
            users_per_cell=3,
            n_tx=3,
            n_rx=2,
            power_budget=cfg.power_budget,
            radius=cfg.radius,
            min_radius=cfg.min_radius,
        )
    else:
        raise ConfigError(f"unknown scenario {cfg.scenario!r}")
    return Scenario(
        name=cfg.scenario,
        topology=topo,
        rq=tuple(user_profiles(cfg.scenario)),
        noise_power=cfg.noise_power,
        snr_gap=cfg.snr_gap,
        bandwidth=cfg.bandwidth,
        slot_s=cfg.slot_s,
        doppler_hz=cfg.doppler_hz,
        speed_mps=cfg.speed_mps,
        move_period_s=cfg.move_period_s,
    )


def user_manifest(cfg: RunConfig, user: int) -> VideoManifest:
    """The video a given user streams; deterministic in (seed, user)."""
    profiles = user_profiles(cfg.scenario)
    seed = int(np.random.SeedSequence([cfg.seed, 1000 + user]).generate_state(1)[0])
    ladder = tuple(b * cfg.ladder_scale for b in DEFAULT_LADDER_BPS)
    return synth_manifest(
        profiles[user],
        chunk_count=cfg.chunk_count,
        seed=seed,
        chunk_duration_s=cfg.chunk_duration_s,
        size_jitter=cfg.size_jitter,
        quality_jitter=cfg.quality_jitter,
        ladder=ladder,
    )


# --- command implementations ------------------------------------------------------


def _train_config(cfg: RunConfig, n_reps: int, episodes: Optional[int] = None) -> TrainConfig:
    return TrainConfig(
        n_reps=n_reps,
        episodes=episodes if episodes is not None else cfg.episodes,
        history=cfg.history,
        hidden=cfg.hidden,
        gamma=cfg.gamma,
        rollout=cfg.rollout,
        lr_actor=cfg.lr_actor,
        lr_critic=cfg.lr_critic,
        entropy_start=cfg.entropy_start,
        entropy_end=cfg.entropy_end,
        reward_scale=cfg.reward_scale,
        workers=cfg.workers,
        seed=cfg.seed,
        chunk_duration_s=cfg.chunk_duration_s,
        buffer_max_s=cfg.buffer_max_s,
        max_grad_norm=cfg.max_grad_norm if cfg.max_grad_norm > 0 else None,
        quality_scale=60.0,
    )


def _split_traces(traces_dir: Path, split: str, scheme: str) -> List[Path]:
    base = traces_dir / split
    paths = sorted(base.glob(f"{scheme}_*.csv"))
    if not paths:
        raise TraceError(f"no {split} traces for scheme {scheme!r} under {base}")
    return paths


def cmd_gen_traces(cfg: RunConfig, out_dir: Path) -> int:
    scenario = build_scenario(cfg)
    result = make_split(
        out_dir,
        scenario,
        ("qddra", "wmmse"),
        n_train=cfg.n_train,
        n_test=cfg.n_test,
        duration_s=cfg.duration_s,
        base_seed=cfg.seed,
        smoothing=cfg.smoothing,
        cadence_slots=cfg.cadence_slots,
        solver_tol=cfg.solver_tol,
        solver_max_iter=cfg.solver_max_iter,
    )
    total = sum(len(v) for split in result.values() for v in split.values())
    print(f"wrote {total} traces under {out_dir}")
    return 0


def cmd_train(cfg: RunConfig, traces_dir: Path, out_dir: Path, episodes: Optional[int]) -> int:
    paths = _split_traces(traces_dir, "train", cfg.scheme)
    traces = [read_trace(p) for p in paths]
    n_users = traces[0].n_users
    manifests = [user_manifest(cfg, u) for u in range(n_users)]
    sessions = [
        (t, u) for t in range(len(traces)) for u in range(n_users)
    ]
    tcfg = _train_config(cfg, manifests[0].n_reps, episodes)

    def factory(idx: int, rng: np.random.Generator) -> SessionEnv:
        t, u = sessions[idx % len(sessions)]
        return SessionEnv(
            manifests[u],
            traces[t].user_rates(u),
            buffer_max_s=cfg.buffer_max_s,
            switch_penalty=cfg.switch_penalty,
            rebuffer_penalty=cfg.rebuffer_penalty,
        )

    result = train(factory, tcfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"drl_{cfg.scheme}.json"
    save_checkpoint(ckpt, result)
    write_curve(out_dir / f"curve_{cfg.scheme}.csv", result.curve)
    print(
        f"trained {tcfg.episodes} episodes on {len(paths)} {cfg.scheme} traces; "
        f"checkpoint {ckpt}"
    )
    return 0


SESSIONS_HEADER = (
    "scheme,policy,trace,user,mean_qoe,mean_quality,stall_s,startup_s,switches"
)


def cmd_evaluate(
    cfg: RunConfig, traces_dir: Path, out_dir: Path, checkpoint: Optional[Path]
) -> int:
    paths = _split_traces(traces_dir, "test", cfg.scheme)
    traces = [read_trace(p) for p in paths]
    n_users = traces[0].n_users
    manifests = [user_manifest(cfg, u) for u in range(n_users)]
    policies = {
        "rb": rate_based,
        "bb": lambda obs: buffer_based(obs, buffer_max_s=cfg.buffer_max_s),
    }
    if checkpoint is not None:
        ckpt = load_checkpoint(checkpoint)
        policies["drl"] = learned_policy(ckpt.actor, ckpt.config)
    rows = [SESSIONS_HEADER]
    for name, policy in policies.items():
        for t, trace in enumerate(traces):
            for u in range(n_users):
                out = run_session(
                    manifests[u],
                    trace.user_rates(u),
                    policy,
                    buffer_max_s=cfg.buffer_max_s,
                    switch_penalty=cfg.switch_penalty,
                    rebuffer_penalty=cfg.rebuffer_penalty,
                )
                rows.append(
                    "%s,%s,%d,%d,%.17g,%.17g,%.17g,%.17g,%d"
                    % (
                        cfg.scheme,
                        name,
                        t,
                        u,
                        out.mean_qoe,
                        float(out.qualities.mean()),
                        out.stall_s,
                        out.startup_s,
                        out.switches,
                    )
                )
    out_dir.mkdir(parents=True, exist_ok=True)
    dest = out_dir / f"sessions_{cfg.scheme}.csv"
    dest.write_text("\n".join(rows) + "\n")
    print(f"evaluated {len(policies)} policies on {len(traces)} traces -> {dest}")
    return 0


def read_sessions(path) -> List[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SESSIONS_HEADER:
        raise TraceError(f"{path}: not a sessions file")
    cols = SESSIONS_HEADER.split(",")
    out = []
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != len(cols):
            raise TraceError(f"{path}: line {ln}: expected {len(cols)} fields")
        row = dict(zip(cols, parts))
        for key in ("mean_qoe", "mean_quality", "stall_s", "startup_s"):
            row[key] = float(row[key])
        for key in ("trace", "user", "switches"):
            row[key] = int(row[key])
        out.append(row)
    return out


REPORT_HEADER = (
    "scheme,policy,mean_qoe,qoe_unfairness,mean_stall_s,mean_switches,sessions"
)


def aggregate_report(session_rows: List[dict]) -> List[str]:
    """Per scheme x policy: mean QoE over sessions, and unfairness of QoE
    across users within each trace, averaged over traces. Negative QoE is
    clipped to zero for the fairness index only."""
    groups: Dict[Tuple[str, str], List[dict]] = {}
    for row in session_rows:
        groups.setdefault((row["scheme"], row["policy"]), []).append(row)
    lines = [REPORT_HEADER]
    for (scheme, policy) in sorted(groups):
        rows = groups[(scheme, policy)]
        qoe = np.array([r["mean_qoe"] for r in rows])
        stall = np.array([r["stall_s"] for r in rows])
        switches = np.array([r["switches"] for r in rows])
        per_trace: Dict[int, List[float]] = {}
        for r in rows:
            per_trace.setdefault(r["trace"], []).append(r["mean_qoe"])
        unfair = []
        for scores in per_trace.values():
            clipped = np.maximum(scores, 0.0)
            try:
                unfair.append(jain_fairness(clipped)[1])
            except EmptyOrAllZero:
                unfair.append(1.0)  # everyone starved: maximally unfair
        lines.append(
            "%s,%s,%.17g,%.17g,%.17g,%.17g,%d"
            % (
                scheme,
                policy,
                float(qoe.mean()),
                float(np.mean(unfair)),
                float(stall.mean()),
                float(switches.mean()),
                len(rows),
            )
        )
    return lines


def cmd_report(inputs: Sequence[Path], out_dir: Path) -> int:
    rows: List[dict] = []
    for path in inputs:
        rows.extend(read_sessions(path))
    if not rows:
        raise TraceError("no session rows to aggregate")
    lines = aggregate_report(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    dest = out_dir / "report.csv"
    dest.write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 0


# --- argument plumbing ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse, but usage problems exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="qstream", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="INI file of defaults")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--scenario", choices=SCENARIOS, help="topology preset")
    parser.add_argument(
        "--scheme", choices=("qddra", "wmmse"), help="allocation scheme"
    )
    parser.add_argument("--workers", type=int, help="training workers")
    parser.add_argument(
        "--serial", action="store_true", help="force single-worker training"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traces", help="write train/test rate traces")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--duration", type=int, help="seconds per trace")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train", help="train the learned policy on a split")
    p.add_argument("--traces", type=Path, required=True)
    p.add_argument("--out", type=Path, help="defaults to --traces")
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("evaluate", help="run every policy over the test split")
    p.add_argument("--traces", type=Path, required=True)
    p.add_argument("--out", type=Path, help="defaults to --traces")
    p.add_argument("--checkpoint", type=Path, help="learned-policy checkpoint")

    p = sub.add_parser("report", help="aggregate session files into a report")
    p.add_argument("--inputs", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)

    sub.add_parser("config", help="print the effective configuration")
    return parser


def _effective_config(args) -> RunConfig:
    cfg = config_from_ini(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scenario is not None:
        cfg.scenario = args.scenario
    if args.scheme is not None:
        cfg.scheme = args.scheme
    if args.workers is not None:
        cfg.workers = args.workers
    if args.serial:
        cfg.workers = 1
    if getattr(args, "duration", None) is not None:
        cfg.duration_s = args.duration
    if getattr(args, "n_train", None) is not None:
        cfg.n_train = args.n_train
    if getattr(args, "n_test", None) is not None:
        cfg.n_test = args.n_test
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _effective_config(args)
        if args.command == "config":
            print(config_to_ini(cfg), end="")
            return 0
        if args.command == "gen-traces":
            return cmd_gen_traces(cfg, args.out)
        if args.command == "train":
            out = args.out if args.out is not None else args.traces
            return cmd_train(cfg, args.traces, out, args.episodes)
        if args.command == "evaluate":
            out = args.out if args.out is not None else args.traces
            return cmd_evaluate(cfg, args.traces, out, args.checkpoint)
        if args.command == "report":
            return cmd_report(args.inputs, args.out)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"qstream: config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"qstream: {exc}", file=sys.stderr)
        return 2
    except (
        TraceError,
        MalformedTraceFile,
        ManifestError,
        PlayerError,
        CheckpointError,
        NumericsError,
        OSError,
        ValueError,
    ) as exc:
        print(f"qstream: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
