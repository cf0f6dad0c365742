"""Command-line application wiring the pipeline stages to subcommands."""

from __future__ import annotations

import argparse
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .components.cases import SurgicalCase
from .components.evaluation import EvalReport, evaluate_case, summarize_reports
from .components.geometry import LabeledCloud, SourceLabel
from .components.manifold import fuse_subclouds
from .components.network import NetworkParams, forward_predict
from .components.reconstruction import (
    benchmark_jacobi,
    benchmark_graph,
    build_deformation_graph,
    five_iteration_gap,
    reconstruct_dense,
)
from .components.registration import align_on_stable_region
from .components.synthetic import generate_dataset, make_case
from .components.training import case_partition, cross_validate, network_gradcheck, train
from .errors import FaceDeformError
from .utils.checkpoint import load_checkpoint
from .utils.config import RunConfig, bundled_config, load_config
from .utils.heatmap import render_heatmap_png
from .utils.log_handler import install_cli_logging
from .utils.manifest import find_cases, load_case, write_surgical_case
from .utils.mesh_io import (
    read_indexed_ply,
    read_ply,
    write_heatmap_ply,
    write_indexed_ply,
    write_ply,
)
from .utils.reports import (
    write_json,
    write_landmark_csv,
    write_metrics_csv,
    write_summary_csv,
)
from .utils.worker_pool import WorkerPool

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
GRADCHECK_LIMIT = 1e-4

SPARSE_PREDICTION = "prediction_sparse.ply"
DENSE_PREDICTION = "face_pred.ply"


class UsageError(Exception):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage()
        raise UsageError(message)


class FaceDeformApp:
    """Parses arguments, configures logging and dispatches to one pipeline stage."""

    def __init__(self) -> None:
        self.parser = self._build_parser()
        self.config = RunConfig()

    def _build_parser(self) -> argparse.ArgumentParser:
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument(
            "--config", default=None, help="config file, or a bundled name (default, tiny)"
        )
        common.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override one config value (repeatable)",
        )
        common.add_argument(
            "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
        )

        parser = _Parser(prog="facedeform", description="Facial soft-tissue displacement toolkit")
        sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

        p = sub.add_parser("synth", parents=[common], help="generate synthetic cases")
        p.add_argument("--cases", type=int, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True)

        p = sub.add_parser("register", parents=[common], help="align post-op data")
        p.add_argument("--case", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument(
            "--structure", choices=["bone", "face", "both"], default="both",
            help="which post-op structure(s) ICP aligns",
        )

        p = sub.add_parser("train", parents=[common], help="cross-validate and fit the network")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--no-cv", action="store_true", help="skip k-fold cross-validation")

        p = sub.add_parser("predict", parents=[common], help="sparse prediction per sub-cloud")
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--case", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)

        p = sub.add_parser("reconstruct", parents=[common], help="dense Laplacian reconstruction")
        p.add_argument("--dense", type=Path, required=True, help="dense pre-op face PLY")
        p.add_argument("--sparse", type=Path, required=True, help="indexed sparse prediction PLY")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument(
            "--default-label", choices=[s.name.lower() for s in SourceLabel], default="face_pre",
            help="label for dense points when the PLY has no label column",
        )

        p = sub.add_parser("eval", parents=[common], help="score predictions against truth")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--pred", type=Path, default=None, help="<case_id>/face_pred.ply root")
        p.add_argument("--baseline", choices=["identity"], default=None)
        p.add_argument("--out", type=Path, required=True)

        p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
        p.add_argument("--seed", type=int, default=0)

        p = sub.add_parser("bench-solver", parents=[common], help="Jacobi timing table")
        p.add_argument("--sizes", type=int, nargs="+", default=[100_000, 200_000])
        p.add_argument("--trials", type=int, default=5)
        p.add_argument("--gap-nodes", type=int, default=20_000)
        return parser

    def _resolve_config(self, args: argparse.Namespace) -> RunConfig:
        source = args.config
        if source is not None and not Path(source).exists():
            source = bundled_config(source)
        return load_config(source, args.overrides)

    def run(self, argv: Sequence[str] | None = None) -> int:
        """Execute one subcommand.

        Returns:
            0 on success, 1 on a usage error, 2 on a data error
        """
        try:
            args = self.parser.parse_args(argv)
        except UsageError as e:
            print(f"facedeform: error: {e}")
            return EXIT_USAGE
        except SystemExit as e:
            # --help
            return EXIT_OK if e.code in (0, None) else EXIT_USAGE

        install_cli_logging(args.log_level)
        try:
            self.config = self._resolve_config(args)
            handler = getattr(self, "_cmd_" + args.command.replace("-", "_"))
            return handler(args)
        except UsageError as e:
            print(f"facedeform: error: {e}")
            return EXIT_USAGE
        except (FaceDeformError, OSError) as e:
            logger.error("%s", e)
            return EXIT_DATA

    def _cmd_synth(self, args: argparse.Namespace) -> int:
        with WorkerPool(self.config.workers) as pool:
            cases = generate_dataset(args.cases, self.config, args.seed, args.out, pool)
        print(f"wrote {len(cases)} case(s) to {args.out}")
        return EXIT_OK

    def _cmd_register(self, args: argparse.Namespace) -> int:
        case = load_case(args.case)
        structures = ("bone", "face") if args.structure == "both" else (args.structure,)
        registered, record = register_case(case, self.config, structures)
        write_surgical_case(registered, args.out, registration=record)
        return EXIT_OK

    def _cmd_train(self, args: argparse.Namespace) -> int:
        dataset = [load_case(d) for d in find_cases(args.data)]
        if not dataset:
            raise FaceDeformError(f"no case directories under {args.data}")
        if not args.no_cv:
            folds = cross_validate(dataset, self.config, args.out)
            write_json({"folds": folds}, args.out / "folds.json")
            for f in folds:
                print(
                    f"fold {f.fold}: test chamfer {f.model_chamfer:.6g} "
                    f"identity {f.identity_chamfer:.6g}"
                )
        result = train(
            dataset, self.config, args.out / "loss.csv", args.out / "checkpoints"
        )
        print(f"final loss {result.log[-1].total:.6g} after {self.config.epochs} epoch(s)")
        return EXIT_OK

    def _cmd_predict(self, args: argparse.Namespace) -> int:
        tensors, saved_config, _ = load_checkpoint(args.checkpoint)
        params = NetworkParams(saved_config)
        params.load_state_dict(tensors)
        case = load_case(args.case)
        partition = case_partition(case, saved_config)
        with WorkerPool(self.config.workers) as pool:
            preds = forward_predict(case, params, saved_config, partition, pool)
        for s, pred in enumerate(preds):
            write_indexed_ply(
                pred.face_indices, pred.predicted.numpy(), args.out / f"subcloud_{s}.ply"
            )
        fused = fuse_subclouds(partition, [p.displacement.numpy() for p in preds])
        write_indexed_ply(
            fused.indices,
            case.face_pre.points[fused.indices] + fused.vectors,
            args.out / SPARSE_PREDICTION,
        )
        print(f"predicted {len(fused)} face point(s) in {len(preds)} sub-cloud(s)")
        return EXIT_OK

    def _cmd_reconstruct(self, args: argparse.Namespace) -> int:
        dense = read_ply(args.dense, SourceLabel[args.default_label.upper()])
        indices, predicted = read_indexed_ply(args.sparse)
        if indices.size and (indices.min() < 0 or indices.max() >= len(dense)):
            raise FaceDeformError("sparse prediction indexes outside the dense face")
        graph = build_deformation_graph(
            dense,
            indices,
            predicted - dense.points[indices],
            self.config.resolved_k_rec(len(dense)),
            symmetrize=self.config.symmetrize,
            kernel=self.config.kernel,
        )
        field, report = reconstruct_dense(
            graph, self.config.jacobi_tol, self.config.jacobi_max_iters
        )
        write_ply(
            LabeledCloud.uniform(dense.points + field.vectors, SourceLabel.FACE_PRE),
            args.out / DENSE_PREDICTION,
        )
        write_json(
            {
                "iterations": report.iterations,
                "residual": report.residual,
                "converged": report.converged,
                "elapsed_s": report.elapsed_s,
            },
            args.out / "solve_report.json",
        )
        return EXIT_OK

    def _cmd_eval(self, args: argparse.Namespace) -> int:
        if (args.pred is None) == (args.baseline is None):
            raise UsageError("eval needs exactly one of --pred and --baseline")
        reports: list[EvalReport] = []
        for case_dir in find_cases(args.data):
            case = load_case(case_dir)
            if case.face_post is None or case.face_mesh is None:
                raise FaceDeformError(f"case {case.case_id} has no post-op face or mesh")
            if args.baseline == "identity":
                predicted = case.face_pre.points
            else:
                predicted = read_ply(args.pred / case.case_id / DENSE_PREDICTION).points
            report = score_case(case, predicted, self.config)
            reports.append(report)
            truth = case.face_mesh.with_vertices(case.face_post.points)
            write_heatmap_ply(
                truth.with_vertices(predicted),
                report.signed_deviations,
                args.out / case.case_id / "heatmap.ply",
            )
            render_heatmap_png(
                truth.with_vertices(predicted),
                report.signed_deviations,
                args.out / case.case_id / "heatmap.png",
            )
        if not reports:
            raise FaceDeformError(f"no case directories under {args.data}")
        write_metrics_csv(reports, args.out / "metrics.csv")
        write_landmark_csv(reports, args.out / "landmarks.csv")
        summary = summarize_reports(reports)
        write_summary_csv(summary, args.out / "summary.csv")
        for name, (mean, sd, count) in summary.items():
            logger.info("%s: %.4f +/- %.4f over %d case(s)", name, mean, sd, count)
        return EXIT_OK

    def _cmd_gradcheck(self, args: argparse.Namespace) -> int:
        config = self.config.with_overrides(subclouds=1)
        case = make_case(1, config, args.seed).to_surgical_case()
        report = network_gradcheck(case, config, seed=args.seed)
        print(f"max relative error {report.max_error:.3e}")
        return EXIT_OK if report.max_error < GRADCHECK_LIMIT else EXIT_DATA

    def _cmd_bench_solver(self, args: argparse.Namespace) -> int:
        k_rec = self.config.resolved_k_rec(max(args.sizes))
        rows = benchmark_jacobi(tuple(args.sizes), k_rec, trials=args.trials)
        print(f"{'nodes':>10} {'k_rec':>6} {'s/iter':>12}")
        for row in rows:
            print(f"{row.nodes:>10} {row.k_rec:>6} {row.seconds_per_iteration:>12.6f}")
        if len(rows) > 1:
            ratio = rows[-1].seconds_per_iteration / rows[0].seconds_per_iteration
            print(f"time ratio {ratio:.3f} for {rows[-1].nodes / rows[0].nodes:.3g}x nodes")
        gap = five_iteration_gap(benchmark_graph(args.gap_nodes, k_rec))
        print(f"iterate-5 gap at N={args.gap_nodes}: {gap:.4f} mm")
        return EXIT_OK


def register_case(
    case: SurgicalCase,
    config: RunConfig,
    structures: Sequence[str] = ("bone", "face"),
) -> tuple[SurgicalCase, dict[str, dict]]:
    """Bring post-op structures into the pre-op frame via their stable regions.

    Args:
        case: Case whose manifest lists stable landmarks per structure
        config: Supplies the ICP iteration limit and tolerance
        structures: ``bone`` and/or ``face``; the others are copied unchanged

    Returns:
        The registered case and, per aligned structure, its transform, RMS and
        iteration count (recorded in the output manifest)
    """
    record: dict[str, dict] = {}

    def align(moving: LabeledCloud, fixed: LabeledCloud, name: str) -> np.ndarray:
        fit = align_on_stable_region(
            moving, fixed, case.stable_landmarks.get(name, ()),
            max_iters=config.icp_max_iters, tol=config.icp_tol,
        )
        logger.info("%s registration rms %.4f mm in %d iteration(s)", name, fit.rms, fit.iterations)
        record[name] = {
            **fit.transform.to_dict(), "rms_mm": fit.rms, "iterations": fit.iterations,
        }
        return fit.transform.apply(moving)

    bone_post = case.bone_post
    if "bone" in structures:
        bone_post = LabeledCloud.uniform(
            align(case.bone_post, case.bone_pre, "bone"), SourceLabel.BONE_POST
        )
    face_post = case.face_post
    if "face" in structures and face_post is not None:
        face_post = LabeledCloud.uniform(
            align(face_post, case.face_pre, "face"), SourceLabel.FACE_PRE
        )
    registered = SurgicalCase(
        case.case_id,
        case.bone_pre,
        bone_post,
        case.face_pre,
        face_post,
        case.face_mesh,
        case.landmarks,
        case.landmark_regions,
        case.stable_landmarks,
    )
    return registered, record


def score_case(case: SurgicalCase, predicted: np.ndarray, config: RunConfig) -> EvalReport:
    """Evaluate a dense prediction, including the error of each sparse sub-cloud."""
    truth = case.face_mesh.with_vertices(case.face_post.points)
    try:
        subclouds = case_partition(case, config).face
    except FaceDeformError:
        subclouds = ()
    return evaluate_case(
        predicted,
        truth,
        case.landmarks,
        case_id=case.case_id,
        landmark_regions=case.landmark_regions,
        subclouds=subclouds,
    )
