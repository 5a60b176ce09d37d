"""Command-line entry point: ``streamst <command> [options]``.

Commands: ``generate-data``, ``train``, ``translate``, ``simulate``, ``score``
and ``grad-check``.  Configuration is a JSON document with the sections
``data``, ``model``, ``train`` and ``policy`` plus a top-level ``seed``;
``--config FILE`` loads one and ``--set section.key=value`` overrides single
keys.  Unknown keys are rejected.  Every artifact embeds the resolved config.

Exit codes: 0 success, 1 failed check or runtime error, 2 bad usage,
configuration or input, 3 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import multiprocessing
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, data, metrics, policy
from .model import SRC, TGT, Batch, Model, ModelConfig, gradient_check
from .policy import DecisionLog, PolicyConfig, PolicyError
from .train import TrainConfig, TrainingDiverged, train

log = logging.getLogger("streamst")

STRIDE_GRID_MS = (120, 200, 360, 400, 440, 600, 800, 1000, 40000)
K_GRID = (5, 7, 9, 10, 15, 20)
GRAD_TOLERANCE = 1e-3

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

SECTIONS = {"data": data.SyntheticSpec, "model": ModelConfig, "train": TrainConfig,
            "policy": PolicyConfig}


def _coerce(cls, key: str, value):
    default = {f.name: f.default for f in dataclasses.fields(cls)}[key]
    if isinstance(value, list) and isinstance(default, tuple):
        return tuple(value)
    if key == "speed_perturb" and isinstance(value, list):
        return tuple(value)
    return value


def _plain(obj) -> dict:
    out = dataclasses.asdict(obj)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in out.items()}


@dataclass
class RunConfig:
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for name, cls in SECTIONS.items():
            section = getattr(self, name)
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(cls)}
            for key in section:
                if key not in known:
                    raise ConfigError(f"unknown config key {name}.{key}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(raw) - set(SECTIONS) - {"seed"}
        if extra:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(extra))}")
        return cls(**{k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()})

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
        return cls.from_dict(raw.get("run_config", raw) if isinstance(raw, dict) else raw)

    def override(self, assignments: Sequence[str]) -> RunConfig:
        raw = self.to_dict()
        for item in assignments:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            if key == "seed":
                raw["seed"] = parsed
                continue
            section, dot, name = key.partition(".")
            if not dot or section not in SECTIONS:
                raise ConfigError(f"unknown config key {key}")
            raw[section][name] = parsed
        return RunConfig.from_dict(raw)

    def to_dict(self) -> dict:
        return {"data": dict(self.data), "model": dict(self.model), "train": dict(self.train),
                "policy": dict(self.policy), "seed": self.seed}

    def _build(self, name: str, seeded: bool):
        cls = SECTIONS[name]
        kw = {k: _coerce(cls, k, v) for k, v in getattr(self, name).items()}
        if seeded:
            kw.setdefault("seed", self.seed)
        try:
            return cls(**kw)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"invalid {name} config: {err}") from None

    def data_spec(self) -> data.SyntheticSpec:
        return self._build("data", False)

    def model_config(self) -> ModelConfig:
        return self._build("model", True)

    def train_config(self) -> TrainConfig:
        return self._build("train", True)

    def policy_config(self) -> PolicyConfig:
        return self._build("policy", False)

    def resolved(self) -> dict:
        """Every section with defaults filled in; what artifacts embed."""
        return {"data": self.data_spec().to_dict(), "model": self.model_config().to_dict(),
                "train": self.train_config().to_dict(), "policy": _plain(self.policy_config()),
                "seed": self.seed}


def _provenance(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "version": __version__, "run_config": cfg.resolved(), **extra}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _manifest_path(args) -> Path:
    if args.manifest:
        return _require_file(args.manifest, "manifest")
    if not args.data:
        raise UsageError("give --manifest or --data")
    root = Path(args.data)
    if not root.is_dir():
        raise UsageError(f"corpus directory not found: {root}")
    return _require_file(root / f"{args.split}.tsv", "manifest")


def _with_corpus(cfg: RunConfig, root: Path | None) -> RunConfig:
    """Fill the data section from the corpus's own config; explicit keys win."""
    path = root / "config.json" if root is not None else None
    if path is None or not path.is_file():
        return cfg
    stored = json.loads(path.read_text()).get("run_config", {}).get("data", {})
    return RunConfig.from_dict({**cfg.to_dict(), "data": {**stored, **cfg.data}})


def _with_checkpoint(cfg: RunConfig, model: Model) -> RunConfig:
    """Adopt the checkpoint's model and data sections so artifacts describe what ran."""
    stored = model.meta.get("extra", {}).get("run_config", {})
    raw = cfg.to_dict()
    raw["model"] = dict(model.meta.get("config", raw["model"]))
    if "data" in stored:
        raw["data"] = {**stored["data"], **cfg.data}
    return RunConfig.from_dict(raw)


def _load_model(path) -> Model:
    path = _require_file(path, "checkpoint")
    try:
        return Model.load(path)
    except (ValueError, KeyError, OSError) as err:
        raise UsageError(f"cannot load checkpoint {path}: {err}") from None


def _tokens_text(tokens) -> str:
    return " ".join(str(int(t)) for t in tokens)


def _k_text(k) -> str:
    return "inf" if k is None else str(k)


def score_logs(logs: Sequence[DecisionLog], references: dict[str, str] | None = None
               ) -> metrics.LatencyReport:
    """Utterance-mean latency and corpus BLEU over finished decision logs."""
    if not logs:
        raise UsageError("no decision logs to score")
    if references is not None:
        ids = [lg.utt_id for lg in logs]
        missing = sorted(set(ids) - set(references))
        unused = sorted(set(references) - set(ids))
        if missing or unused:
            parts = []
            if missing:
                parts.append("logs without reference: " + ", ".join(missing))
            if unused:
                parts.append("references without log: " + ", ".join(unused))
            raise UsageError("; ".join(parts))
    hyps, refs, trip = [], [], []
    for lg in logs:
        ref = lg.reference if references is None else references[lg.utt_id]
        hyps.append(_tokens_text(lg.tokens()))
        refs.append(ref)
        trip.append(metrics.latency_triplet(lg.delay_vector(len(ref.split()))))
    al, missing = metrics.mean_or_none(t[0] if t else None for t in trip)
    ap, _ = metrics.mean_or_none(t[1] if t else None for t in trip)
    dal, _ = metrics.mean_or_none(t[2] if t else None for t in trip)
    return metrics.LatencyReport(AL=al, AP=ap, DAL=dal, BLEU=metrics.corpus_bleu(hyps, refs),
                                 n_utterances=len(logs), n_missing=missing)


def _report_row(pc: PolicyConfig, report: metrics.LatencyReport) -> dict:
    if pc.kind == "offline":
        return {"policy": pc.kind, "k": "NA", "stride_ms": None, **report.as_row()}
    return {"policy": pc.kind, "k": _k_text(pc.k), "stride_ms": pc.stride_ms, **report.as_row()}


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_data(args, cfg: RunConfig) -> int:
    spec = cfg.data_spec()
    corpus = data.generate_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _provenance(cfg, "generate-data")
    for name, utts in corpus.splits().items():
        kept = data.filter_corpus(utts)
        data.write_manifest(out / f"{name}.tsv", kept, frames_dir=out / "frames", header=header)
        log.info("%s: %d utterances (%d filtered)", name, len(kept), len(utts) - len(kept))
    (out / "config.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    root = Path(args.data)
    if not root.is_dir():
        raise UsageError(f"corpus directory not found: {root}")
    utts = list(data.load_manifest(_require_file(root / "train.tsv", "training manifest")))
    if not utts:
        raise UsageError(f"{root / 'train.tsv'} holds no utterances")
    if args.limit:
        utts = utts[: args.limit]
    cfg = _with_corpus(cfg, root)
    tc = cfg.train_config()
    model = Model(cfg.model_config())
    curve_path = Path(args.curve) if args.curve else Path(str(args.out) + ".curve.tsv")
    prov = _provenance(cfg, "train", corpus=str(root))
    t0 = time.perf_counter()
    try:
        curve = train(model, utts, tc)
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        print(json.dumps(err.snapshot, sort_keys=True), file=sys.stderr)
        return EXIT_DIVERGED
    elapsed = time.perf_counter() - t0
    cols = ("step", "total", "l_qua", "l_asr", "l_st", "lr", "grad_norm")
    lines = ["# " + json.dumps(prov, sort_keys=True), "\t".join(cols)]
    lines += ["\t".join(repr(r[c]) for c in cols) for r in curve]
    curve_path.write_text("\n".join(lines) + "\n")
    model.save(args.out, extra={**prov, "steps_run": len(curve), "final": curve[-1]})
    log.info("trained %d steps in %.1fs; final total %.4f", len(curve), elapsed, curve[-1]["total"])
    print(json.dumps({"steps": len(curve), "seconds": round(elapsed, 2), **curve[-1]}, sort_keys=True))
    return EXIT_OK


def cmd_translate(args, cfg: RunConfig) -> int:
    path = _manifest_path(args)
    model = _load_model(args.checkpoint)
    cfg = _with_checkpoint(cfg, model)
    indicator = SRC if args.task == "asr" else TGT
    prov = _provenance(cfg, "translate", checkpoint=str(args.checkpoint), manifest=str(path),
                       beam=args.beam, task=args.task)
    lines = ["# " + json.dumps(prov, sort_keys=True)]
    hyps, refs = [], []
    for u in data.load_manifest(path):
        hyp = model.translate(u.frames, indicator, args.beam)
        ref = u.transcript if args.task == "asr" else u.translation
        hyps.append(hyp)
        refs.append(ref)
        lines.append(f"{u.id}\t{_tokens_text(hyp)}")
    _write_text(args.out, "\n".join(lines) + "\n")
    if hyps:
        bleu = metrics.corpus_bleu([_tokens_text(h) for h in hyps], [_tokens_text(r) for r in refs])
        print(f"BLEU {bleu:.2f}  token_accuracy {metrics.token_accuracy(hyps, refs):.4f}",
              file=sys.stderr)
    return EXIT_OK


_WORKER: dict = {}


def _worker_init(checkpoint: str) -> None:
    _WORKER["model"] = Model.load(checkpoint)


def _simulate_one(job) -> DecisionLog:
    pc, u = job
    _, lg = policy.run_policy(_WORKER["model"], u.frames, pc, frame_ms=u.frame_ms, utt_id=u.id,
                              reference=_tokens_text(u.translation))
    return lg


def _sweep_points(base: PolicyConfig, mode: str | None) -> list[PolicyConfig]:
    if mode is None:
        return [base]
    if base.kind == "offline":
        raise UsageError("--sweep needs a streaming policy (prefix or adaptive)")
    strides = STRIDE_GRID_MS if mode in ("stride", "grid") else (base.stride_ms,)
    ks = K_GRID if mode in ("k", "grid") else (base.k,)
    return [dataclasses.replace(base, k=k, stride_ms=float(s)) for s in strides for k in ks]


def cmd_simulate(args, cfg: RunConfig) -> int:
    overrides = {"kind": args.policy, "stride_ms": args.stride_ms, "max_len": args.max_len}
    if args.k is not None:
        overrides["k"] = None if args.k.lower() in ("inf", "none") else int(args.k)
    cfg = RunConfig.from_dict({**cfg.to_dict(), "policy": {
        **cfg.policy, **{k: v for k, v in overrides.items() if v is not None}}})
    cfg = _with_corpus(cfg, Path(args.data) if args.data else None)
    base = cfg.policy_config()
    points = _sweep_points(base, args.sweep)
    frame_ms = cfg.data_spec().frame_ms
    for pc in points:
        try:
            pc.validate(frame_ms)
        except PolicyError as err:
            raise UsageError(str(err)) from None
    path = _manifest_path(args)
    cfg = _with_checkpoint(cfg, _load_model(args.checkpoint))
    utts = list(data.load_manifest(path, frame_ms=frame_ms))
    if args.limit:
        utts = utts[: args.limit]
    if not utts:
        raise UsageError(f"{path} holds no utterances")
    rows = []
    logs_target = Path(args.logs) if args.logs else None
    if logs_target is not None and args.sweep:
        logs_target.mkdir(parents=True, exist_ok=True)
    ctx = multiprocessing.get_context("fork") if args.workers > 1 else None
    pool = ctx.Pool(args.workers, _worker_init, (str(args.checkpoint),)) if ctx else None
    if pool is None:
        _worker_init(str(args.checkpoint))
    try:
        for pc in points:
            jobs = [(pc, u) for u in utts]
            logs = list(pool.imap(_simulate_one, jobs, chunksize=4) if pool else map(_simulate_one, jobs))
            rows.append(_report_row(pc, score_logs(logs)))
            if logs_target is not None:
                prov = _provenance(cfg, "simulate", checkpoint=str(args.checkpoint), manifest=str(path),
                                   point=_plain(pc))
                target = (logs_target / f"{pc.kind}_k{_k_text(pc.k)}_s{int(pc.stride_ms)}.log"
                          if args.sweep else logs_target)
                with open(target, "w") as fh:
                    policy.write_logs(logs, fh, prov)
            log.info("%s k=%s stride=%s: %s", pc.kind, _k_text(pc.k), pc.stride_ms, rows[-1])
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    prov = _provenance(cfg, "simulate", checkpoint=str(args.checkpoint), manifest=str(path),
                       sweep=args.sweep, n_utterances=len(utts), rate="reference length")
    _write_text(args.report, metrics.format_table(rows, json.dumps(prov, sort_keys=True)))
    return EXIT_OK


def cmd_score(args, cfg: RunConfig) -> int:
    all_logs, headers = [], []
    for p in args.logs:
        header, logs = policy.parse_logs(_require_file(p, "decision log").read_text())
        headers.append(header)
        all_logs.extend(logs)
    refs = None
    if args.references:
        refs = {u.id: _tokens_text(u.translation)
                for u in data.load_manifest(_require_file(args.references, "reference manifest"))}
    point = headers[0].get("point", {}) if headers else {}
    pc = PolicyConfig(**{k: v for k, v in point.items() if k in ("kind", "k", "stride_ms", "max_len")})
    report = score_logs(all_logs, refs)
    prov = {"command": "score", "version": __version__, "logs": [str(p) for p in args.logs],
            "source_config": headers[0].get("run_config") if headers else None,
            "n_utterances": report.n_utterances, "n_missing": report.n_missing,
            "rate": "reference length"}
    _write_text(args.report, metrics.format_table([_report_row(pc, report)], json.dumps(prov, sort_keys=True)))
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig) -> int:
    model_kw = {"d_model": 16, "n_heads": 2, "N": 1, "M": 1, "d_ff": 32, "conv_channels": 16, "d": 9}
    model_kw.update(cfg.model)
    cfg = RunConfig.from_dict({**cfg.to_dict(), "model": model_kw})
    spec = dataclasses.replace(cfg.data_spec(), n_samples=40, src_len=(2, 3), frames_per_token=(2, 4))
    corpus = data.generate_corpus(spec)
    batch = Batch.from_utterances(corpus.train[: args.batch])
    if batch.frames.shape[1] > 12:
        raise UsageError("grad-check corpus exceeds 12 frames")
    errors = gradient_check(Model(cfg.model_config()), batch, cfg.train_config().loss_weights,
                            h=args.step, seed=cfg.seed)
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    ok = worst <= args.tolerance and all(math.isfinite(e) for e in errors.values())
    print(json.dumps({"max_rel_error": worst, "worst_param": worst_name, "n_params": len(errors),
                      "tolerance": args.tolerance, "passed": ok}, sort_keys=True))
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamst", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (or an artifact's config.json)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; VALUE is parsed as JSON when possible")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", parents=[common], help="train on a generated corpus")
    p.add_argument("--data", required=True, help="corpus directory from generate-data")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--curve", help="loss curve TSV (default: <out>.curve.tsv)")
    p.add_argument("--limit", type=int, help="use only the first N training utterances")
    p.set_defaults(func=cmd_train)

    def source(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", help="manifest to decode")
        p.add_argument("--data", help="corpus directory (with --split)")
        p.add_argument("--split", default="test", choices=("train", "dev", "test"))

    p = sub.add_parser("translate", parents=[common], help="offline decoding")
    source(p)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--task", choices=("st", "asr"), default="st")
    p.add_argument("--out", help="hypotheses TSV (default stdout)")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("simulate", parents=[common], help="streaming simulation and scoring")
    source(p)
    p.add_argument("--policy", choices=policy.KINDS)
    p.add_argument("--k", help="lagging k / K; 'inf' for unbounded")
    p.add_argument("--stride-ms", type=float)
    p.add_argument("--max-len", type=int)
    p.add_argument("--sweep", nargs="?", const="stride", choices=("stride", "k", "grid"),
                   help="iterate the stride grid, the k grid, or both")
    p.add_argument("--limit", type=int, help="simulate only the first N utterances")
    p.add_argument("--logs", help="decision-log file (a directory with --sweep)")
    p.add_argument("--report", help="score table (default stdout)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("score", parents=[common], help="rescore existing decision logs")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--references", help="manifest whose translations are the references")
    p.add_argument("--report", help="score table (default stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the joint loss")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=GRAD_TOLERANCE)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        sets = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = cfg.override(sets)
        cfg.resolved()  # surface invalid values before any work
        return args.func(args, cfg)
    except (ConfigError, UsageError, data.ManifestError, PolicyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
