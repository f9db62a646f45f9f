"""Command-line driver: ``python -m iekd <command> --config run.json --out DIR``.

Config file (JSON, every key optional)::

    {
      "dataset": {"recipe": "blobs-img", "seed": 7, "n_train": 2000, "n_test": 1000,
                  "num_classes": 3, "params": {}}
                 | {"idx": "data/dir"}
                 | {"csv": {"train": "train.csv", "test": "test.csv", "shape": [1, 16, 16]}},
      "teacher": {NetConfig fields}, "student": {NetConfig fields},
      "train": {DistillConfig fields},          # student / distill / iedml runs
      "teacher_train": {DistillConfig fields},  # teacher runs (defaults to "train")
      "codec": {"epochs": 30, "lr": 0.1, "batch_size": 64, "ratio": 2, "seed": 0},
      "iedml": {"net1": {NetConfig}, "net2": {NetConfig}},
      "ablation": {"grid": [{"eta": 0.0}, ...], "seeds": [0, 1, 2]},
      "analysis": {"sigmas": [0, 0.01, 0.02], "draws": 8, "tau": 1e-6, "n_samples": 500, "seed": 0}
    }

Exit codes: 0 success, 1 verification mismatch, 2 config error, 3 numeric
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import tempfile
from dataclasses import replace
from pathlib import Path


from . import analysis as an
from .codec import FactorCodec
from .data import Dataset, generate_synthetic, load_csv, load_dataset_idx
from .errors import (
    ChannelNotDivisible,
    ConfigMismatch,
    DegenerateBatch,
    IEKDError,
    InvalidConfig,
    InvalidRecipe,
    MalformedFile,
    NumericFailure,
    ShapeMismatch,
    ZeroNormFactor,
)
from .gradcheck import run_suite
from .losses import SplitSpec
from .manifest import RunManifest, file_sha256, read_manifest, verify, write_summary_csv
from .nets import NetConfig, PairConfig, build_net
from .nn import load_checkpoint, load_into, save_stacks, state_hash
from .train import (
    DistillConfig,
    distill_iekd,
    train_codec,
    train_iedml,
    train_supervised,
)

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

DEFAULT_DATASET = {"recipe": "blobs-img", "seed": 7, "n_train": 2000, "n_test": 1000, "num_classes": 3, "params": {}}
DEFAULT_CODEC = {"epochs": 30, "lr": 0.1, "batch_size": 64, "ratio": 2, "seed": 0}
DEFAULT_ANALYSIS = {"sigmas": [0.0, 0.01, 0.02, 0.04], "draws": 8, "tau": 1e-6, "n_samples": 500, "seed": 0}
COMMANDS = ("train-teacher", "train-ae", "distill", "iedml", "ablate", "analyze", "gradcheck")


# --- config resolution -------------------------------------------------------


def _list(text: str, cast):
    return [cast(v) for v in text.split(",") if v.strip()]


def resolve_config(raw: dict, args: argparse.Namespace) -> dict:
    """Fill defaults and apply command-line overrides; the result fully determines the run."""
    cfg = copy.deepcopy(raw)
    pair = PairConfig()
    cfg["dataset"] = {**DEFAULT_DATASET, **cfg.get("dataset", {})}
    cfg["teacher"] = {**pair.teacher.to_dict(), **cfg.get("teacher", {})}
    cfg["student"] = {**pair.student.to_dict(), **cfg.get("student", {})}
    cfg["train"] = DistillConfig.from_dict(cfg.get("train", {})).to_dict()
    cfg["teacher_train"] = DistillConfig.from_dict(cfg.get("teacher_train", cfg["train"])).to_dict()
    cfg["codec"] = {**DEFAULT_CODEC, **cfg.get("codec", {})}
    cfg["analysis"] = {**DEFAULT_ANALYSIS, **cfg.get("analysis", {})}
    iedml = cfg.get("iedml", {})
    cfg["iedml"] = {
        "net1": {**cfg["student"], **iedml.get("net1", {})},
        "net2": {**cfg["student"], "seed": cfg["student"]["seed"] + 1, **iedml.get("net2", {})},
    }
    abl = cfg.get("ablation", {})
    cfg["ablation"] = {"grid": abl.get("grid", [{"eta": e} for e in (0.0, 0.3, 0.5, 0.7, 1.0)]),
                       "seeds": abl.get("seeds", [0])}

    train = cfg["train"]
    for key, attr in (("lambda_inh", "lambda_inh"), ("lambda_exp", "lambda_exp"), ("eta", "eta"),
                      ("metric", "metric"), ("variant", "variant"), ("epochs", "epochs")):
        value = getattr(args, attr, None)
        if value is not None:
            train[key] = value
    if getattr(args, "seed", None) is not None:
        s = args.seed
        net_key = getattr(args, "net", None) or ("teacher" if args.command == "train-teacher" else "student")
        target = cfg["teacher_train"] if net_key == "teacher" else train
        target.update(seed_data=s, seed_init=s, seed_split=s)
        cfg[net_key]["seed"] = s
    if getattr(args, "eta_grid", None):
        cfg["ablation"]["grid"] = [{"eta": e} for e in _list(args.eta_grid, float)]
    if getattr(args, "seeds", None):
        cfg["ablation"]["seeds"] = _list(args.seeds, int)
    cfg["train"] = DistillConfig.from_dict(train).to_dict()
    for key in ("teacher", "student"):
        NetConfig.from_dict(cfg[key]).validate()
    return cfg


def load_dataset(spec: dict) -> Dataset:
    if "idx" in spec:
        return load_dataset_idx(spec["idx"], spec.get("num_classes"))
    if "csv" in spec:
        c = spec["csv"]
        shape = tuple(c["shape"]) if c.get("shape") else None
        x_tr, y_tr = load_csv(c["train"], shape)
        x_te, y_te = load_csv(c["test"], shape)
        k = spec.get("num_classes") or int(max(y_tr.max(), y_te.max())) + 1
        return Dataset(x_tr, y_tr, x_te, y_te, k, "csv", None, {"train": c["train"], "test": c["test"]})
    return generate_synthetic(spec["recipe"], spec["seed"], spec["n_train"], spec["n_test"],
                              spec["num_classes"], **spec.get("params", {}))


# --- pipeline pieces ---------------------------------------------------------


class Run:
    """Shared state for one CLI invocation."""

    def __init__(self, cfg: dict, out: Path, args: argparse.Namespace):
        self.cfg, self.out, self.args = cfg, out, args
        self.dataset = load_dataset(cfg["dataset"])
        self.inputs: dict = {}

    def net(self, key: str, name: str):
        return build_net(NetConfig.from_dict(self.cfg[key]), name)

    def teacher(self):
        net = self.net("teacher", "teacher")
        path = getattr(self.args, "teacher", None)
        if path:
            _, _, state = load_checkpoint(path)
            load_into([net], state)
            self.inputs["teacher"] = file_sha256(path)
        else:
            m = train_supervised(net, self.dataset, DistillConfig.from_dict(self.cfg["teacher_train"]), "train-teacher")
            self._stamp(m, "train-teacher", "teacher")
            self._emit(m, self.out / "teacher", [net], "teacher")
        return net

    def codec(self, teacher):
        path = getattr(self.args, "codec", None)
        c = self.cfg["codec"]
        if path:
            _, meta, state = load_checkpoint(path)
            codec = FactorCodec(meta["channels"], tuple(meta["spatial"]), ratio=meta["ratio"])
            load_into(codec.stacks, state)
            self.inputs["codec"] = file_sha256(path)
            return codec
        codec, m = train_codec(teacher, self.dataset, c["epochs"], c["lr"], c["batch_size"], c["ratio"], c["seed"])
        self._stamp(m, "train-ae")
        self._emit(m, self.out / "codec", codec.stacks, "codec", codec_meta(codec))
        return codec

    def _emit(self, m: RunManifest, directory: Path, stacks, ckpt_kind: str, meta=None) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        if stacks:
            path = directory / f"{ckpt_kind}.ckpt"
            save_stacks(path, stacks, ckpt_kind, meta)
            m.artifacts[path.name] = file_sha256(path)
        m.write(directory)

    def _stamp(self, m: RunManifest, command: str, net=None) -> None:
        # the replay recipe read back by --verify
        m.config = {"cli": self.cfg, "command": command, "inputs": dict(self.inputs), "overrides": {"net": net}}

    def finish(self, m: RunManifest, stacks=(), ckpt_kind: str = "", meta=None) -> RunManifest:
        self._stamp(m, self.args.command, getattr(self.args, "net", None))
        self._emit(m, self.out, list(stacks), ckpt_kind, meta)
        return m


def codec_meta(codec: FactorCodec) -> dict:
    return {"channels": codec.channels, "spatial": list(codec.spatial), "ratio": codec.ratio}


def cmd_train_teacher(run: Run) -> tuple:
    key = run.args.net or "teacher"
    net = run.net(key, key)
    train_key = "teacher_train" if key == "teacher" else "train"
    m = train_supervised(net, run.dataset, DistillConfig.from_dict(run.cfg[train_key]), "train-teacher")
    run.finish(m, [net], key)
    last = m.epochs[-1]
    return m, f"train-teacher net={key} test_error={last['test_error']:.4f} test_loss={last['test_loss']:.4f}"


def cmd_train_ae(run: Run) -> tuple:
    teacher = run.teacher()
    c = run.cfg["codec"]
    codec, m = train_codec(teacher, run.dataset, c["epochs"], c["lr"], c["batch_size"], c["ratio"], c["seed"])
    run.finish(m, codec.stacks, "codec", codec_meta(codec))
    ratio = m.epochs[-1]["rec"] / m.analysis["initial_rec"]
    return m, f"train-ae rec={m.epochs[-1]['rec']:.4g} (x{ratio:.3f} of initial) teacher_frozen={m.analysis['teacher_frozen']}"


def cmd_distill(run: Run) -> tuple:
    teacher = run.teacher()
    codec = run.codec(teacher)
    student = run.net("student", "student")
    r = distill_iekd(teacher, codec, student, run.dataset, DistillConfig.from_dict(run.cfg["train"]))
    run.finish(r.manifest, [student] + [e.stack for e in (r.enc_inh, r.enc_exp) if e is not None], "student")
    last = r.manifest.epochs[-1]
    return r.manifest, (f"distill test_error={last['test_error']:.4f} inh={last['inh']:.4g} exp={last['exp']:.4g} "
                        f"frozen_ok={r.manifest.analysis['frozen_ok']}")


def cmd_iedml(run: Run) -> tuple:
    cfg = DistillConfig.from_dict(run.cfg["train"])
    n1 = build_net(NetConfig.from_dict(run.cfg["iedml"]["net1"]), "net1")
    n2 = build_net(NetConfig.from_dict(run.cfg["iedml"]["net2"]), "net2")
    c1 = FactorCodec(*_tap(n1), ratio=cfg.ratio, seed=cfg.seed_init, name="codec1")
    c2 = FactorCodec(*_tap(n2), ratio=cfg.ratio, seed=cfg.seed_init + 1, name="codec2")
    r = train_iedml(n1, n2, c1, c2, run.dataset, cfg)
    stacks = [s for p in r.peers for s in p.stacks]
    run.finish(r.manifest, stacks, "iedml")
    last = r.manifest.epochs[-1]
    return r.manifest, (f"iedml test_error1={last['test_error1']:.4f} test_error2={last['test_error2']:.4f} "
                        f"hash_checks={last['hash_checks']}")


def _tap(net) -> tuple:
    shape = net.tap_shape("feat")
    return shape[0], tuple(shape[1:])


def cmd_ablate(run: Run) -> tuple:
    teacher = run.teacher()
    codec = run.codec(teacher)
    base = DistillConfig.from_dict(run.cfg["train"])
    grid, seeds = run.cfg["ablation"]["grid"], run.cfg["ablation"]["seeds"]
    rows, manifests = [], []
    for ci, overrides in enumerate(grid):
        for seed in seeds:
            cfg = base.replace(**overrides, seed_data=seed, seed_init=seed, seed_split=seed)
            student = build_net(replace(NetConfig.from_dict(run.cfg["student"]), seed=seed), "student")
            r = distill_iekd(teacher, codec, student, run.dataset, cfg)
            # each cell is a replayable distill run of its own
            cell_cli = copy.deepcopy(run.cfg)
            cell_cli["train"] = cfg.to_dict()
            cell_cli["student"]["seed"] = seed
            r.manifest.config = {"cli": cell_cli, "command": "distill", "inputs": dict(run.inputs),
                                 "overrides": {"net": None}}
            stacks = [student] + [e.stack for e in (r.enc_inh, r.enc_exp) if e is not None]
            run._emit(r.manifest, run.out / f"cell{ci}_seed{seed}", stacks, "student")
            last = r.manifest.epochs[-1]
            rows.append({"cell": ci, "eta": cfg.eta, "metric": cfg.metric, "lambda_inh": cfg.lambda_inh,
                         "lambda_exp": cfg.lambda_exp, "seed": seed, "test_error": last["test_error"],
                         "test_loss": last["test_loss"], "metrics_hash": r.manifest.metrics_hash()})
            manifests.append(r.manifest)
    m = RunManifest("ablate", "ablation", {}, run.dataset.identity())
    m.analysis["summary"] = rows
    run.out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(run.out / "summary.csv", rows)
    m.artifacts["summary.csv"] = file_sha256(run.out / "summary.csv")
    run.finish(m)
    return m, f"ablate cells={len(grid)} seeds={len(seeds)} rows={len(rows)}"


def cmd_analyze(run: Run) -> tuple:
    key = run.args.net or "student"
    net = run.net(key, key)
    if not run.args.checkpoint:
        raise InvalidConfig("analyze needs --checkpoint")
    _, _, state = load_checkpoint(run.args.checkpoint)
    load_into([net], state)
    run.inputs["checkpoint"] = file_sha256(run.args.checkpoint)
    a, t = run.cfg["analysis"], DistillConfig.from_dict(run.cfg["train"])
    split = SplitSpec.random(t.eta, net.tap_shape("feat")[0], t.seed_split)
    n = min(a["n_samples"], run.dataset.x_train.shape[0])
    x, y = run.dataset.x_train[:n], run.dataset.y_train[:n]
    before = state_hash(net, include_buffers=True)
    report, curve = an.analysis_report(net, split, x, y, a["sigmas"], a["draws"], a["seed"], a["tau"])
    if state_hash(net, include_buffers=True) != before:
        raise NumericFailure("analysis modified the network")
    run.out.mkdir(parents=True, exist_ok=True)
    curve.write_csv(run.out / "sharpness.csv")
    feats = an.tap_features(net, x)
    reps = {"inh": feats[:, list(split.inh_indices)], "exp": feats[:, list(split.exp_indices)], "all": feats}
    reps = {k: v for k, v in reps.items() if v.shape[1]}
    names, matrix = an.cka_matrix(reps)
    an.write_cka_csv(run.out / "cka.csv", names, matrix)
    an.save_activations(run.out / "activations.bin", feats)
    m = RunManifest("analyze", "analysis", {}, run.dataset.identity())
    m.analysis = report
    for f in ("sharpness.csv", "cka.csv", "activations.bin"):
        m.artifacts[f] = file_sha256(run.out / f)
    run.finish(m)
    cka = report.get("cka_inh_exp")
    return m, f"analyze active_neurons={report['active_neurons']} cka_inh_exp={'n/a' if cka is None else f'{cka:.4f}'}"


def cmd_gradcheck(run: Run) -> tuple:
    results = run_suite()
    m = RunManifest("gradcheck", "gradcheck", {}, {})
    m.analysis["cases"] = [{"name": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance,
                            "passed": r.passed} for r in results]
    run.finish(m)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericFailure(f"gradcheck failed: {', '.join(failed)}")
    worst = max(r.max_rel_error for r in results)
    return m, f"gradcheck cases={len(results)} all passed worst_rel_error={worst:.2e}"


HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "train-ae": cmd_train_ae,
    "distill": cmd_distill,
    "iedml": cmd_iedml,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


# --- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iekd", description="Inheritance/exploration distillation lab.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config")
        s.add_argument("--out", default=f"runs/{name}", help="output directory")
        s.add_argument("--seed", type=int, help="override data-order, init and split seeds")
        s.add_argument("--verify", metavar="MANIFEST", help="re-run a stored manifest and compare hashes")
        if name in ("train-teacher", "analyze"):
            s.add_argument("--net", choices=("teacher", "student"))
        if name in ("train-ae", "distill", "ablate"):
            s.add_argument("--teacher", help="teacher checkpoint (else trained inline)")
        if name in ("distill", "ablate"):
            s.add_argument("--codec", help="codec checkpoint (else trained inline)")
        if name in ("distill", "ablate", "iedml"):
            s.add_argument("--lambda-inh", dest="lambda_inh", type=float)
            s.add_argument("--lambda-exp", dest="lambda_exp", type=float)
            if name != "ablate":
                s.add_argument("--eta", type=float)
            s.add_argument("--metric")
            s.add_argument("--variant", choices=("ft", "at", "od"))
        if name == "ablate":
            s.add_argument("--eta", dest="eta_grid", help="comma-separated eta grid")
            s.add_argument("--seeds", help="comma-separated seeds")
        if name == "analyze":
            s.add_argument("--checkpoint")
        if name != "gradcheck":
            s.add_argument("--epochs", type=int)
    return p


def _execute(args: argparse.Namespace, raw: dict, out: Path) -> RunManifest:
    cfg = resolve_config(raw, args)
    run = Run(cfg, out, args)
    manifest, summary = HANDLERS[args.command](run)
    print(summary)
    return manifest


def _verify(args: argparse.Namespace) -> int:
    stored = read_manifest(args.verify)
    recorded = stored.config
    if recorded.get("command") != args.command:
        raise InvalidConfig(f"manifest was written by {recorded.get('command')!r}, not {args.command!r}")
    replay = argparse.Namespace(**{**vars(args), "seed": None, "lambda_inh": None, "lambda_exp": None,
                                   "eta": None, "metric": None, "variant": None, "epochs": None,
                                   "eta_grid": None, "seeds": None, "net": recorded["overrides"].get("net")})
    with tempfile.TemporaryDirectory() as tmp:
        replayed = _execute(replay, recorded["cli"], Path(tmp))
    diff = verify(stored, replayed)
    if diff is None and replayed.config.get("inputs") != recorded.get("inputs"):
        diff = "input checkpoints differ from the recorded ones"
    if diff is None and replayed.artifacts != stored.artifacts:
        diff = "regenerated artifact hashes differ"
    if diff is None:
        print(f"verify OK metrics_hash={stored.metrics_hash()}")
        return EXIT_OK
    print(f"verify MISMATCH {diff}")
    return EXIT_MISMATCH


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verify:
            return _verify(args)
        raw = json.loads(Path(args.config).read_text()) if args.config else {}
        _execute(args, raw, Path(args.out))
        return EXIT_OK
    except MalformedFile as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericFailure, DegenerateBatch, ZeroNormFactor, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidConfig, ConfigMismatch, InvalidRecipe, ChannelNotDivisible, ShapeMismatch, json.JSONDecodeError,
            TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IEKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
