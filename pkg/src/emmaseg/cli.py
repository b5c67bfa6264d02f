"""``emma`` command line.

Every failure is reported on stderr as one line ``emma: error[<code>]: <message>``
and the process exits with the error's status (see :mod:`emmaseg.errors`).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .architectures.checkpoint import load_checkpoint
from .architectures.network import NetworkInstance
from .autodiff.tensor import Tensor
from .config import RunConfig
from .ensemble import (
    ConfidenceMap,
    EnsembleManifest,
    TilingSpec,
    argmax_segment,
    predict_full_volume,
    run_emma,
)
from .errors import DataError, EmmaError, UsageError
from .gradcheck import SCOPES, run_suite
from .metrics import evaluate
from .phantom import phantom_generate
from .preprocessing.normalization import (
    BIAS_MODES,
    VERSIONS,
    LandmarkModel,
    NormalizationSpec,
    apply_normalization,
)
from .toy import toy_demo
from .training import normalize_cases, train_network
from .validation import BRATS_LABELS
from .volume_io import VolumeContainer, read_case, read_volume, write_case, write_volume

VOLUME_SUFFIX = ".emv"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"emma: error[{UsageError.code}]: {message}", file=sys.stderr)
        sys.exit(UsageError.exit_status)


def map_container(cmap: ConfidenceMap, spacing) -> VolumeContainer:
    return VolumeContainer(cmap.probs, spacing, tuple(f"p{v}" for v in BRATS_LABELS[:cmap.n_classes]))


def label_container(labels: np.ndarray, spacing) -> VolumeContainer:
    return VolumeContainer(labels[None].astype(np.uint8), spacing, ("label",))


def _cast(instance: NetworkInstance, precision: int | None) -> NetworkInstance:
    if precision is None:
        return instance
    dtype = np.float64 if precision == 64 else np.float32
    instance.params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                       for k, v in instance.params.items()}
    instance.buffers = {k: v.astype(dtype) for k, v in instance.buffers.items()}
    return instance


def _write_outputs(cmap: ConfidenceMap, labels: np.ndarray, spacing, out: Path,
                   labels_out: Path | None) -> None:
    write_volume(out, map_container(cmap, spacing))
    if labels_out:
        write_volume(labels_out, label_container(labels, spacing))


def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = phantom_generate(args.seed, args.count, tuple(args.extents), args.bias_field)
    for c in cases:
        write_case(out / f"{c.case_id}{VOLUME_SUFFIX}", c)
    print(f"wrote {len(cases)} phantoms to {out}")
    return 0


def cmd_normalize(args) -> int:
    cases = [read_case(p) for p in args.cases]
    landmarks = LandmarkModel.load(args.landmarks) if args.landmarks else None
    spec = NormalizationSpec(args.version, args.bias_correction, args.degree, landmarks)
    if spec.version == "v3_bfc_pwl_zscore" and landmarks is None and len(cases) < 2:
        raise UsageError("v3 normalisation needs --landmarks or at least two cases to learn them from")
    normed, spec = normalize_cases(cases, spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c in normed:
        write_case(out / f"{c.case_id}{VOLUME_SUFFIX}", c)
    (out / "normalization.json").write_text(json.dumps(spec.to_json(), indent=2))
    print(f"normalised {len(normed)} cases with {spec.version} into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.precision is not None:
        cfg.doc["precision"] = args.precision
    result = train_network(cfg)
    print(f"trained {cfg.architecture} for {cfg.iterations} iterations; "
          f"final loss {result.losses[-1]:.6f}; checkpoint {cfg.checkpoint_path}")
    return 0


def cmd_predict(args) -> int:
    instance = _cast(load_checkpoint(args.checkpoint), args.precision)
    norm = NormalizationSpec.from_json(instance.meta["normalization"])
    case = read_case(args.case)
    cmap = predict_full_volume(instance, apply_normalization(case, norm), TilingSpec(args.tile),
                               member_id=str(args.checkpoint), normalization=norm.version)
    labels = argmax_segment(cmap)
    _write_outputs(cmap, labels, case.spacing, Path(args.out), args.labels_out)
    print(f"wrote confidence map {args.out}")
    return 0


def cmd_ensemble(args) -> int:
    manifest = EnsembleManifest.load(args.manifest, tiling=TilingSpec(args.tile))
    case = read_case(args.case)
    cmap, labels = run_emma(manifest, case)
    _write_outputs(cmap, labels, case.spacing, Path(args.out), args.labels_out)
    print(f"averaged {len(manifest.members)} members into {args.out}")
    return 0


def _labels_of(path) -> tuple[np.ndarray, tuple]:
    vol = read_volume(path)
    if "label" not in vol.channel_names:
        raise DataError(f"{Path(path).name} has no 'label' channel")
    return vol.channel("label").astype(np.uint8), vol.spacing


def cmd_evaluate(args) -> int:
    pred, spacing = _labels_of(args.pred)
    ref, _ = _labels_of(args.ref)
    probs = read_volume(args.probs).data if args.probs else None
    report = evaluate(pred, ref, spacing, Path(args.ref).name.split(".")[0], probs)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.dumps())
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.scope, args.instances, args.seed)
    failed = [r for r in results if not r.passed]
    worst: dict[str, float] = {}
    for r in results:
        worst[r.op] = max(worst.get(r.op, 0.0), r.rel_error)
    for op, err in worst.items():
        print(f"{op:24s} max_rel_error={err:.3e} {'FAIL' if err > 1e-4 else 'ok'}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_toydemo(args) -> int:
    report = toy_demo(args.seed)
    if args.out:
        Path(args.out).write_text(json.dumps(report))
    for m, c in zip(report["members"], report["member_crossings"]):
        where = "none" if c is None else f"{c:+.3f}"
        print(f"{m['loss']:14s} decay={m['weight_decay']:<5} noise={m['label_noise']:<4} crossing={where}")
    print(f"average crossing {report['crossing']:+.3f} (midpoint {report['midpoint']:+.1f})")
    return 0 if report["between_centers"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emma", description="Heterogeneous CNN ensembles for "
                                "brain-tumour segmentation on multi-modal volumes.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    p.add_argument("--precision", type=int, choices=(32, 64), default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate synthetic labelled cases")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--extents", type=int, nargs=3, default=(64, 64, 64))
    s.add_argument("--bias-field", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("normalize", help="apply an intensity normalisation pipeline")
    s.add_argument("cases", nargs="+")
    s.add_argument("--version", choices=VERSIONS, default="v1_zscore")
    s.add_argument("--bias-correction", choices=BIAS_MODES, default="polynomial")
    s.add_argument("--degree", type=int, choices=(2, 3), default=3)
    s.add_argument("--landmarks", help="landmark JSON (v3); learned from the cases if omitted")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("train", help="train one network from a JSON run config")
    s.add_argument("config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="confidence map of one checkpoint on one case")
    s.add_argument("checkpoint")
    s.add_argument("case")
    s.add_argument("out")
    s.add_argument("--labels-out")
    s.add_argument("--tile", type=int, default=64)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ensemble", help="average the members of a manifest on one case")
    s.add_argument("manifest")
    s.add_argument("case")
    s.add_argument("out")
    s.add_argument("--labels-out")
    s.add_argument("--tile", type=int, default=64)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("evaluate", help="Dice, sensitivity and HD95 per tumour region")
    s.add_argument("pred")
    s.add_argument("ref")
    s.add_argument("--probs", help="confidence map for the histogram diagnostics")
    s.add_argument("--out", help="write the JSON report here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--scope", default="all", help=f"one of {sorted(SCOPES)} or an op name")
    s.add_argument("--instances", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("toy-demo", help="1-D ensemble of single-unit classifiers")
    s.add_argument("--out")
    s.set_defaults(func=cmd_toydemo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limit = threadpool_limits(limits=args.threads) if args.threads else nullcontext()
    try:
        with limit:
            return args.func(args)
    except EmmaError as e:
        print(f"emma: error[{e.code}]: {e}", file=sys.stderr)
        return e.exit_status
    except OSError as e:
        print(f"emma: error[io]: {e.strerror or e}: {e.filename}", file=sys.stderr)
        return 10


if __name__ == "__main__":
    sys.exit(main())
