"""``proto-ood`` command line: synth, train, eval, score, inspect.

Configuration is a JSON file with optional ``synthetic``, ``train`` and
``decision`` sections; flags override it.  Every subcommand writes the fully
resolved configuration to ``resolved_config.json`` in its output directory.

Exit codes: 0 success, 1 domain/validation error, 2 IO/usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datasets import (
    FormatError,
    GenerationError,
    ParseError,
    SyntheticConfig,
    generate_synthetic,
    load_split,
    save_detection_dump,
    save_split,
)
from .evaluator import EvaluationError, evaluate_groups, score_split
from .numerics import cosine_rows
from .proto_head import CheckpointError, OODDecisionConfig, StateError, load_checkpoint
from .trainer import ConfigError, TrainConfig, TrainingDiverged, train

logger = logging.getLogger("proto_ood")

ABLATION_FLAGS = {"full": "full", "no-neg": "no_neg_generator", "no-con-no-neg": "no_contrastive_no_neg"}
SPLIT_FILES = {"train": "train.posplit", "id_eval": "id_eval.posplit", "ood_eval": "ood_eval.posplit"}
CHECKPOINT_NAME = "model.ckpt"


class UsageFailure(Exception):
    """IO or usage problem; maps to exit code 2."""


@dataclass
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decision: OODDecisionConfig = field(default_factory=OODDecisionConfig)

    def to_dict(self) -> dict:
        return {"synthetic": asdict(self.synthetic), "train": asdict(self.train), "decision": asdict(self.decision)}

    def write(self, out_dir: Path, **paths) -> None:
        doc = self.to_dict()
        doc["paths"] = {k: str(v) for k, v in paths.items() if v is not None}
        (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _coerce(section, key: str, raw):
    names = {f.name: f for f in fields(section)}
    if key not in names:
        raise ConfigError(f"unknown config key {type(section).__name__}.{key}")
    current = getattr(section, key)
    if isinstance(raw, str):
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
            return raw.lower() in ("true", "1")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float) or (current is None and key == "ood_offset"):
            return None if raw.lower() == "none" else float(raw)
    return raw


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    cfg = RunConfig()
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageFailure(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    unknown = set(doc) - {"synthetic", "train", "decision"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    for section_name, values in doc.items():
        section = getattr(cfg, section_name)
        for key, value in values.items():
            setattr(section, key, _coerce(section, key, value))
    for item in overrides:
        name, sep, value = item.partition("=")
        section_name, dot, key = name.partition(".")
        if not sep or not dot or section_name not in ("synthetic", "train", "decision"):
            raise UsageFailure(f"override must look like section.key=value, got {item!r}")
        section = getattr(cfg, section_name)
        try:
            setattr(section, key, _coerce(section, key, value))
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {exc}") from None
    # re-run dataclass validation on the merged values
    cfg.decision = OODDecisionConfig(**asdict(cfg.decision))
    return cfg


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.synthetic.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "ablation", None) is not None:
        cfg.train.ablation = ABLATION_FLAGS[args.ablation]
    if getattr(args, "gamma", None) is not None:
        cfg.decision = OODDecisionConfig(args.gamma, cfg.decision.reduction)
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageFailure(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageFailure(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _load_split(path):
    if not Path(path).is_file():
        raise UsageFailure(f"split file not found: {path}")
    return load_split(path)


def cmd_synth(cfg: RunConfig, out_dir) -> dict[str, Path]:
    out = _out_dir(out_dir)
    splits = generate_synthetic(cfg.synthetic)
    written = {}
    for split in splits:
        path = out / SPLIT_FILES[split.role]
        try:
            save_split(split, path)
        except OSError as exc:
            raise UsageFailure(f"cannot write {path}: {exc}") from None
        written[split.role] = path
        print(f"{split.role}: {len(split)} records -> {path}")
    cfg.write(out)
    return written


def cmd_train(cfg: RunConfig, data_dir, out_dir) -> Path:
    out = _out_dir(out_dir)
    split = _load_split(Path(data_dir) / SPLIT_FILES["train"])
    ckpt = out / CHECKPOINT_NAME
    state, report = train(split, cfg.train, cfg.decision, checkpoint_path=ckpt)
    report.checkpoint_path = CHECKPOINT_NAME
    report.write(out)
    cfg.write(out, data=data_dir)
    last = report.epochs[-1]
    print(f"trained {len(report.epochs)} epochs in {report.wall_clock:.1f}s; final loss {last.total:.6f} -> {ckpt}")
    return ckpt


def cmd_eval(cfg: RunConfig, checkpoint, id_split, ood_split, protocol: str, out_dir,
             gamma: float | None = None) -> list[Path]:
    out = _out_dir(out_dir)
    state = _load_ckpt(checkpoint)
    if gamma is not None:
        state.decision = OODDecisionConfig(gamma, state.decision.reduction)
    ids, oods = _load_split(id_split), _load_split(ood_split)
    groups = score_split(state, ids, "id_dataset") + score_split(state, oods, "ood_dataset")
    written = []
    for p in (("A", "B") if protocol == "both" else (protocol.upper(),)):
        report = evaluate_groups(groups, p)
        path = out / f"metrics_{p}.json"
        report.write(path)
        written.append(path)
        print(f"protocol {p}: fpr95={report.fpr95:.4f} auroc={report.auroc:.4f} "
              f"threshold={report.threshold:.6g} n_id={report.n_id} n_ood={report.n_ood}")
    cfg.decision = state.decision
    cfg.write(out, checkpoint=checkpoint, id_split=id_split, ood_split=ood_split)
    return written


def cmd_score(cfg: RunConfig, checkpoint, split_path, out_dir, gamma: float | None = None) -> Path:
    out = _out_dir(out_dir)
    state = _load_ckpt(checkpoint)
    if gamma is not None:
        state.decision = OODDecisionConfig(gamma, state.decision.reduction)
    split = _load_split(split_path)
    source = "ood_dataset" if split.role == "ood_eval" else "id_dataset"
    groups = score_split(state, split, source)
    path = out / (Path(split_path).stem + ".podump")
    save_detection_dump(groups, path)
    n = sum(len(g.predictions) for g in groups)
    n_id = sum(p.g for g in groups for p in g.predictions)
    print(f"scored {n} predictions in {len(groups)} images (gamma={state.decision.gamma}, {n_id} ID) -> {path}")
    cfg.decision = state.decision
    cfg.write(out, checkpoint=checkpoint, split=split_path)
    return path


def cmd_inspect(checkpoint, out_dir=None) -> dict:
    state = _load_ckpt(checkpoint)
    bank = state.bank
    norms = [float(np.linalg.norm(row)) for row in bank.p]
    cos = cosine_rows(bank.p, bank.p)
    summary = {"t": state.t, "h": state.h, "d": state.d, "alpha": bank.alpha,
               "seen": [bool(s) for s in bank.seen], "norms": norms,
               "pairwise_cosine": [[float(x) for x in row] for row in cos],
               "gamma": state.decision.gamma, "reduction": state.decision.reduction}
    print(f"t={state.t} h={state.h} d={state.d} alpha={bank.alpha}")
    for c in range(state.t):
        row = " ".join(f"{x:+.3f}" for x in cos[c])
        print(f"  [{c}] seen={int(bank.seen[c])} norm={norms[c]:.4f} cos: {row}")
    if out_dir is not None:
        out = _out_dir(out_dir)
        (out / "inspect.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="proto-ood", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate synthetic feature splits")

    p = sub.add_parser("train", parents=[common], help="train the prototype head")
    p.add_argument("--data", required=True, help="directory holding train.posplit")
    p.add_argument("--ablation", choices=sorted(ABLATION_FLAGS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--gamma", type=float)

    p = sub.add_parser("eval", parents=[common], help="compute FPR95/AUROC")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id-split", required=True)
    p.add_argument("--ood-split", required=True)
    p.add_argument("--protocol", choices=("a", "b", "both"), default="both")
    p.add_argument("--gamma", type=float)

    p = sub.add_parser("score", parents=[common], help="write a detection dump with energies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--gamma", type=float)

    p = sub.add_parser("inspect", parents=[common], help="summarise the prototype bank")
    p.add_argument("--checkpoint", required=True)
    return parser


def _thread_limit():
    n = os.environ.get("PROTO_OOD_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            cfg = _apply_flags(load_run_config(args.config, args.overrides), args)
            if args.command == "synth":
                cmd_synth(cfg, args.out)
            elif args.command == "train":
                cmd_train(cfg, args.data, args.out)
            elif args.command == "eval":
                cmd_eval(cfg, args.checkpoint, args.id_split, args.ood_split, args.protocol, args.out, args.gamma)
            elif args.command == "score":
                cmd_score(cfg, args.checkpoint, args.split, args.out, args.gamma)
            else:
                cmd_inspect(args.checkpoint, args.out)
    except (UsageFailure, OSError) as exc:
        print(f"proto-ood: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ParseError, FormatError, GenerationError, EvaluationError,
            StateError, TrainingDiverged, ValueError) as exc:
        print(f"proto-ood: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
