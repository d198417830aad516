"""Command-line driver: ``fpgap {train,verify,attack,errchar,quantize-demo}``.

Exit codes: 0 success or Robust, 10 NotRobust (for ``attack``: at least
one adversarial example found), 11 Timeout, 2 usage or input error, 1
training failure.  Reports are JSON with sorted keys and never contain
wall-clock times, so reruns with the same seeds are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attack as atk
from . import errchar
from .backends import (
    F32_BACKENDS, Backend, infer, measure_layer_error, quantize_network, quantized_infer,
)
from .core import PerturbationSet, PreconditionError, QuantizationScheme, cw_loss
from .modelgen import ArchError, TrainingDiverged, accuracy, gen_dataset, train
from .modelio import ModelFormatError, file_digest, load_dataset, load_model, package_data, save_dataset, save_model
from .verifier import DEFAULT_TIME_LIMIT, Verdict, verify_closest, verify_worst

log = logging.getLogger("fpgap")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NOT_ROBUST = 10
EXIT_TIMEOUT = 11

DEMO_CONFIG = "demo_config.json"
DEMO_MODEL = "demo_model.fpgap"
DEMO_DATASET = "demo_dataset.fpgap"
DEMO_SEEDS = "demo_seeds.json"
SEED_COUNT = 8


class UsageError(Exception):
    pass


def _hex(x: np.ndarray) -> list:
    return [float(v).hex() for v in np.asarray(x, dtype=np.float64).ravel()]


def _num(v):
    """JSON-safe scalar: infinities become strings, rationals become floats."""
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else repr(v)


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FPGAP_THREADS", "1")))
    except ValueError:
        return 1


def _effective_config(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "out_dir", "verbose"):
            continue  # where and how loudly a run writes does not change its results
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, list):
            v = [str(i) for i in v]
        out[k] = v
    return out


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _model(args):
    return load_model(args.model or package_data(DEMO_MODEL))


def _dataset(args):
    return load_dataset(args.dataset or package_data(DEMO_DATASET))


def _seeds(args) -> dict:
    return _load_json(args.seeds or package_data(DEMO_SEEDS))


def _eps(args, seeds: dict | None = None) -> float:
    if args.eps is not None:
        eps = args.eps
    elif seeds is not None:
        eps = float(seeds["eps"])
    else:
        eps = float(_load_json(package_data(DEMO_CONFIG))["eps"])
    if not eps >= 0:
        raise UsageError("--eps must be nonnegative")
    return eps


def _backends(names) -> list:
    if not names or names == ["all"]:
        return list(F32_BACKENDS)
    try:
        return [Backend(n) for n in names]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# train


def select_seeds(net, dataset, eps: float, count: int = SEED_COUNT, time_limit: float = 60.0) -> list:
    """First test images that are verified robust and whose darkened version is not."""
    chosen = []
    for idx in dataset.indices("test"):
        x, t = dataset.images[idx], int(dataset.labels[idx])
        if int(np.argmax(infer(Backend.REF_F64, net, x.astype(np.float64)))) != t:
            continue
        if verify_worst(net, PerturbationSet(x, eps), t, 0.0, "double", time_limit).verdict is not Verdict.ROBUST:
            continue
        zero = np.zeros_like(x)
        if verify_worst(net, PerturbationSet(zero, eps), t, 0.0, "double", time_limit).verdict \
                is not Verdict.NOT_ROBUST:
            continue
        chosen.append({"index": int(idx), "label": t})
        if len(chosen) == count:
            break
    return chosen


def cmd_train(args) -> int:
    cfg = _load_json(args.config or package_data(DEMO_CONFIG))
    if args.arch is not None:
        arch_src = Path(args.arch)
        cfg["arch"] = _load_json(arch_src) if arch_src.exists() else _parse_json_arg(args.arch, "--arch")
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.eps is not None:
        cfg["eps"] = args.eps
    dcfg, tcfg = cfg["dataset"], cfg["train"]
    out = Path(args.out_dir)
    log.info("training with seed %d", tcfg["seed"])
    dataset = gen_dataset(int(dcfg["seed"]), int(dcfg["size"]), int(dcfg["num_classes"]))
    try:
        net = train(cfg["arch"], dataset, epochs=int(tcfg["epochs"]), lr=float(tcfg["lr"]),
                    pgd=tcfg.get("pgd"), seed=int(tcfg["seed"]), batch_size=int(tcfg.get("batch_size", 32)))
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out.mkdir(parents=True, exist_ok=True)
    save_model(net, out / DEMO_MODEL, extra={"config": cfg})
    save_dataset(dataset, out / DEMO_DATASET)
    xte, yte = dataset.subset("test")
    report = {"config": cfg, "effective_args": _effective_config(args),
              "test_accuracy": accuracy(net, xte, yte),
              "train_accuracy": accuracy(net, *dataset.subset("train")),
              "model_digest": file_digest(out / DEMO_MODEL)}
    if args.select_seeds:
        seeds = select_seeds(net, dataset, float(cfg["eps"]))
        write_json(out / DEMO_SEEDS, {"eps": float(cfg["eps"]), "seeds": seeds})
        report["seeds"] = seeds
    write_json(out / "train_report.json", report)
    print(f"model: {out / DEMO_MODEL}")
    print(f"test accuracy: {report['test_accuracy']:.4f}")
    return EXIT_OK


def _parse_json_arg(text: str, flag: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{flag} is neither a file nor valid JSON: {exc}") from exc


# --------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    net = _model(args)
    dataset = _dataset(args)
    if not 0 <= args.index < len(dataset):
        raise UsageError(f"--index {args.index} out of range")
    x0 = dataset.images[args.index]
    t0 = int(dataset.labels[args.index]) if args.label is None else args.label
    eps = _eps(args)
    mode = "rational" if args.exact else "double"
    if args.objective == "closest":
        res = verify_closest(net, x0, eps, t0, args.time_limit, mode)
    else:
        res = verify_worst(net, PerturbationSet(x0, eps), t0, args.tau, mode, args.time_limit)
    report = {"config": _effective_config(args), "verdict": res.verdict.value, "margin": _num(res.margin),
              "lower_bound": _num(res.lower_bound), "incumbent": _num(res.incumbent),
              "stats": res.stats.as_dict(), "label": t0, "eps": eps}
    if res.counterexample is not None:
        cex = np.asarray(res.counterexample, dtype=np.float64)
        report["counterexample"] = _hex(cex)
        report["counterexample_cw_ref"] = float(cw_loss(infer(Backend.REF_F64, net, cex, check=False), t0))
    print(f"verdict: {res.verdict.value}")
    print(f"margin: {report['margin']}")
    print("stats: " + ", ".join(f"{k}={v}" for k, v in res.stats.as_dict().items()))
    if args.out_dir:
        write_json(Path(args.out_dir) / f"verify_{args.index}.json", report)
    return {Verdict.ROBUST: EXIT_OK, Verdict.NOT_ROBUST: EXIT_NOT_ROBUST, Verdict.TIMEOUT: EXIT_TIMEOUT}[res.verdict]


# --------------------------------------------------------------------------
# attack


def _seed_report_dict(rep: atk.SeedReport, x_seed, dataset, bias_shift: bool) -> dict:
    d = rep.as_dict()
    d["x_seed"] = _hex(x_seed)
    if rep.alpha is not None:
        d["x0"] = _hex(rep.alpha.x0)
    if rep.quasi is not None:
        d["x1"] = _hex(rep.quasi.x1)
    for b, out in rep.outcomes.items():
        d["attacks"][b]["x_final"] = _hex(out.final_image)
    if bias_shift and rep.shifted_net is not None:
        xte, yte = dataset.subset("test")
        d["shifted_test_accuracy"] = accuracy(rep.shifted_net, xte, yte)
    return d


def summary_table(reports: list, backends: list, bias_shift: bool) -> tuple:
    ok = [r for r in reports if r["status"] == "ok"]
    counts = {b.value: sum(1 for r in ok if r["attacks"].get(b.value, {}).get("status") == "success")
              for b in backends}
    validated = {b.value: sum(1 for r in ok if r["validation"].get(b.value, {}).get("all_pass")) for b in backends}
    summary = {"seeds": len(reports), "quasi_adversarial": len(ok), "partial_tau": sum(
        1 for r in ok if r.get("quasi", {}).get("partial")), "successful_attacks": counts,
        "validated_attacks": validated, "bias_shift": bias_shift,
        "skipped": {r["index"]: r["status"] for r in reports if r["status"] != "ok"}}
    if bias_shift:
        accs = [r["shifted_test_accuracy"] for r in ok if "shifted_test_accuracy" in r]
        summary["min_test_acc"] = min(accs) if accs else None
    names = [b.value for b in backends]
    width = max(len(n) for n in names + ["quasi-adversarial"]) + 2
    lines = ["".ljust(width) + "".join(n.rjust(width) for n in names)]
    lines.append("#seeds".ljust(width) + "".join(str(len(reports)).rjust(width) for _ in names))
    lines.append("quasi-adversarial".ljust(width) + "".join(str(len(ok)).rjust(width) for _ in names))
    lines.append("successful".ljust(width) + "".join(str(counts[n]).rjust(width) for n in names))
    if bias_shift:
        acc = summary["min_test_acc"]
        lines.append("min test acc".ljust(width)
                     + "".join((f"{acc:.4f}" if acc is not None else "-").rjust(width) for _ in names))
    return summary, "\n".join(lines) + "\n"


def cmd_attack(args) -> int:
    net = _model(args)
    dataset = _dataset(args)
    seeds = _seeds(args)
    eps = _eps(args, seeds)
    backends = _backends(args.backend)
    mode = "rational" if args.exact else "double"
    entries = seeds["seeds"]
    if args.limit is not None:
        entries = entries[:args.limit]
    log.info("attack rng seed %d", args.seed)

    def job(pos_entry):
        pos, entry = pos_entry
        idx = int(entry["index"])
        rep = atk.attack_seed(net, dataset.images[idx], int(entry["label"]), eps, backends, index=idx,
                              u=args.u, iters=args.iters, seed=args.seed + 1000 * pos,
                              use_bias_shift=args.bias_shift, time_limit=args.time_limit, mode=mode)
        return _seed_report_dict(rep, dataset.images[idx], dataset, args.bias_shift)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        reports = list(pool.map(job, enumerate(entries)))
    out = Path(args.out_dir)
    for rep in reports:
        write_json(out / f"attack_seed_{rep['index']}.json", rep)
    summary, table = summary_table(reports, backends, args.bias_shift)
    summary["config"] = _effective_config(args)
    summary["eps"] = eps
    write_json(out / "attack_summary.json", summary)
    (out / "attack_summary.txt").write_text(table)
    print(table, end="")
    return EXIT_NOT_ROBUST if any(summary["successful_attacks"].values()) else EXIT_OK


# --------------------------------------------------------------------------
# errchar


def cmd_errchar(args) -> int:
    net = _model(args)
    dataset = _dataset(args)
    test = dataset.indices("test")
    index = test[0] if args.index is None else args.index
    if not 0 <= index < len(dataset):
        raise UsageError(f"--index {index} out of range")
    x = dataset.images[index]
    element = errchar.max_gradient_element(net, x)
    records = errchar.local_sweep(net, x, element, steps=args.steps)
    images = [dataset.images[i] for i in (test if args.images is None else test[:args.images])]
    backends = [Backend.REF_F64, *F32_BACKENDS]
    reference = Backend(args.reference)
    hist = errchar.cross_backend_histogram(images, net, backends, reference)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    errchar.write_sweep_csv(records, out / "sweep.csv")
    errchar.write_histogram_csv(hist, out / "histogram.csv")
    medians = {b.value: errchar.median_relative_difference(images, net, b) for b in F32_BACKENDS}
    sweep_max = {}
    for r in records:
        sweep_max[r.backend] = max(sweep_max.get(r.backend, 0.0), r.linf_change)
    report = {"config": _effective_config(args), "sweep_image": index, "sweep_element": [int(i) for i in element],
              "sweep_max_change": sweep_max, "histogram_total": hist.total, "histogram_reference": reference.value,
              "median_rel_diff_vs_ref_f64": medians}
    write_json(out / "errchar_report.json", report)
    for b, v in medians.items():
        print(f"{b}: median first-layer relative difference vs REF_F64 {v:.3e}")
    return EXIT_OK


# --------------------------------------------------------------------------
# quantize-demo


def _logits_aligned(fn, inputs, backends) -> tuple:
    mismatches = 0
    for x in inputs:
        outs = [np.asarray(fn(b, x), dtype=np.float32) for b in backends]
        if any(not np.array_equal(outs[0].view(np.uint32), o.view(np.uint32)) for o in outs[1:]):
            mismatches += 1
    return mismatches == 0, mismatches


def quantized_inputs(rng, count: int, shape, s0: float) -> list:
    levels = int(round(1.0 / s0))
    return [(rng.integers(0, levels + 1, size=shape) * s0).astype(np.float32) for _ in range(count)]


def cmd_quantize_demo(args) -> int:
    net = _model(args)
    rng = np.random.default_rng(args.seed)
    log.info("quantize-demo rng seed %d", args.seed)
    if not (args.s0 > 0 and args.s1 > 0):
        raise UsageError("--s0 and --s1 must be positive")
    qnet = quantize_network(net, args.s0, args.s1)
    if args.E is None:
        sample = quantized_inputs(rng, args.measure_inputs, net.input_shape, args.s0)
        measured = measure_layer_error(qnet, sample, args.s0, args.s1)
        E = 4.0 * measured if measured > 0 else 4.0 * float(np.finfo(np.float32).eps) * args.s0 * args.s1
    else:
        measured, E = None, args.E
    try:
        scheme = QuantizationScheme(args.s0, args.s1, E)
    except ValueError as exc:
        print(f"error: scheme refused: {exc}", file=sys.stderr)
        return EXIT_USAGE
    inputs = quantized_inputs(rng, args.inputs, net.input_shape, args.s0)
    backends = [Backend.REF_F64, *F32_BACKENDS]

    def run_q(b, x):
        return quantized_infer(qnet, x.astype(np.float64) if b is Backend.REF_F64 else x, scheme, b)

    def run_plain(b, x):
        return infer(b, net, x.astype(np.float64) if b is Backend.REF_F64 else x)

    aligned, bad = _logits_aligned(run_q, inputs, backends)
    control, control_bad = _logits_aligned(run_plain, inputs, backends)
    report = {"config": _effective_config(args), "s0": args.s0, "s1": args.s1, "E": E,
              "measured_layer_error": measured, "inputs": args.inputs, "aligned": aligned,
              "mismatched_inputs": bad, "control_aligned": control, "control_mismatched_inputs": control_bad,
              "backends": [b.value for b in backends]}
    if args.out_dir:
        write_json(Path(args.out_dir) / "quantize_report.json", report)
    print(f"aligned: {str(aligned).lower()}")
    print(f"control aligned: {str(control).lower()} ({control_bad} of {args.inputs} inputs differ)")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpgap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True, dataset=True):
        if model:
            sp.add_argument("--model", type=Path, help="FPGAP-MODEL-v1 file (default: shipped demo model)")
        if dataset:
            sp.add_argument("--dataset", type=Path, help="dataset container (default: shipped demo dataset)")
        sp.add_argument("--out-dir", type=Path, default=None)
        sp.add_argument("--seed", type=int, default=None if sp.prog.endswith("train") else 0)
        sp.add_argument("--deterministic", action="store_true",
                        help="serial, fixed-order execution (the default behaviour; kept for scripts)")

    sp = sub.add_parser("train", help="generate the toy dataset and train a model")
    common(sp, model=False, dataset=False)
    sp.add_argument("--config", type=Path, help="training config JSON (default: shipped demo config)")
    sp.add_argument("--arch", help="architecture as a JSON file or JSON string")
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--select-seeds", action="store_true", help="also pick robust seed images")
    sp.set_defaults(func=cmd_train, out_dir=Path("train_out"))

    sp = sub.add_parser("verify", help="MILP robustness check of one image")
    common(sp)
    sp.add_argument("--index", type=int, default=0, help="image index in the dataset")
    sp.add_argument("--label", type=int, default=None, help="target class (default: dataset label)")
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--tau", type=float, default=0.0)
    sp.add_argument("--objective", choices=["worst", "closest"], default="worst")
    sp.add_argument("--exact", action="store_true", help="exact rational verifier")
    sp.add_argument("--time-limit", type=float, default=DEFAULT_TIME_LIMIT)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("attack", help="alpha search, quasi-adversarial search and random perturbation")
    common(sp)
    sp.add_argument("--seeds", type=Path, help="seed list JSON (default: shipped demo seeds)")
    sp.add_argument("--limit", type=int, default=None, help="use only the first N seeds")
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--backend", action="append", help="backend to attack (repeatable; default all float32)")
    sp.add_argument("--time-limit", type=float, default=DEFAULT_TIME_LIMIT)
    sp.add_argument("--u", type=float, default=atk.DEFAULT_U)
    sp.add_argument("--iters", type=int, default=atk.DEFAULT_ITERS)
    sp.add_argument("--bias-shift", action="store_true", help="lower the target bias by tau0 first")
    sp.add_argument("--exact", action="store_true", help="exact rational verifier")
    sp.set_defaults(func=cmd_attack, out_dir=Path("attack_out"))

    sp = sub.add_parser("errchar", help="write sweep and histogram CSVs")
    common(sp)
    sp.add_argument("--index", type=int, default=None, help="image for the sweep (default: first test image)")
    sp.add_argument("--images", type=int, default=None, help="number of test images for the histogram")
    sp.add_argument("--steps", type=int, default=errchar.SWEEP_STEPS)
    sp.add_argument("--reference", default=Backend.IM2COL_F32.value, choices=[b.value for b in Backend])
    sp.set_defaults(func=cmd_errchar, out_dir=Path("errchar_out"))

    sp = sub.add_parser("quantize-demo", help="check cross-backend alignment of a quantized model")
    common(sp, dataset=False)
    sp.add_argument("--s0", type=float, default=2.0 ** -7)
    sp.add_argument("--s1", type=float, default=2.0 ** -7)
    sp.add_argument("--E", type=float, default=None, help="error bound (default: 4x measured)")
    sp.add_argument("--inputs", type=int, default=1000)
    sp.add_argument("--measure-inputs", type=int, default=100)
    sp.set_defaults(func=cmd_quantize_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for flag in ("iters", "inputs"):
        if getattr(args, flag, 1) is not None and getattr(args, flag, 1) < 1:
            parser.error(f"--{flag} must be at least 1")
    if getattr(args, "u", 1.0) is not None and not getattr(args, "u", 1.0) > 0:
        parser.error("--u must be positive")
    try:
        return args.func(args)
    except (UsageError, ArchError, ModelFormatError, PreconditionError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
