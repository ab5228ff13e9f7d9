"""Command-line pipeline: asset generation, fitting, posing, calibration,
loss evaluation, metric scoring and benchmarking.

Defaults mirror the reference configuration (192 spheres, g=8 weight
neighbors, loss weights 10 / 0.1 / 0.01, 90 % pair-reduction threshold,
0.06 voxel edge, 16384-sample batches). A config file (TOML or JSON)
may pre-set any flag; explicit flags win; unknown config keys are
rejected. Primary outputs are byte-reproducible for a fixed seed and
carry a provenance block (version, seed, config hash); timing numbers
stay out of them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AssetMismatch, ConfigError, SphereProxyError

_PAPER_DEFAULTS = {
    "spheres": 192,
    "neighbors": 8,
    "lambda_empty": 10.0,
    "lambda_is": 0.1,
    "lambda_si": 0.01,
    "threshold": 0.9,
    "voxel": 0.06,
    "batch": 16384,
    "epochs": 2800,
    "lr": 5e-4,
    "lr_decay": 0.5,
    "lr_decay_every": 700,
}


def _config_hash(values: dict) -> str:
    canon = json.dumps(values, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _provenance(args: argparse.Namespace) -> dict:
    values = {
        k: v for k, v in sorted(vars(args).items()) if k not in ("func",)
    }
    return {
        "version": __version__,
        "seed": getattr(args, "seed", 0),
        "config_hash": _config_hash(values),
    }


def _csv_header(prov: dict) -> list[str]:
    return [
        f"# version={prov['version']} seed={prov['seed']} "
        f"config_hash={prov['config_hash']}"
    ]


def _write_json(path: Path, payload: dict, prov: dict) -> None:
    payload = dict(payload)
    payload["provenance"] = prov
    with open(path, "w") as fh:
        json.dump(payload, fh)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    if p.suffix == ".json":
        with open(p) as fh:
            return json.load(fh)
    if p.suffix == ".toml":
        import tomli

        with open(p, "rb") as fh:
            return tomli.load(fh)
    raise ConfigError(f"config file must be .json or .toml, got {p.suffix!r}")


def _overlay_config(args, file_values: dict) -> None:
    """File values fill flags the user left at their defaults."""
    known = set(vars(args)) - {"_explicit", "func", "command", "config"}
    unknown = set(file_values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in file_values.items():
        if key not in args._explicit:
            setattr(args, key, value)


class _TrackingParser(argparse.ArgumentParser):
    """Records which destinations were set explicitly on the command line.

    Subparsers share the namespace, so explicit flags accumulate across
    the main parser and the chosen subcommand.
    """

    def parse_known_args(self, argv=None, namespace=None):
        namespace, leftover = super().parse_known_args(argv, namespace)
        seen = list(sys.argv[1:] if argv is None else argv)
        explicit = set(getattr(namespace, "_explicit", set()))
        for action in self._actions:
            for opt in action.option_strings:
                if any(a == opt or a.startswith(opt + "=") for a in seen):
                    explicit.add(action.dest)
        namespace._explicit = explicit
        return namespace, leftover


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_asset(args) -> int:
    from . import assets
    from .mesh import save_mesh

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(args)
    if args.kind == "capsule_man":
        asset = assets.gen_capsule_man(resolution=args.resolution)
        save_mesh(asset.mesh, out / "mesh.json")
        asset.skeleton.to_json(out / "skeleton.json")
        if args.motion == "random":
            motion = assets.random_motion(
                asset.skeleton, args.frames, seed=args.seed
            )
        else:
            motion = assets.contact_motion(
                asset.skeleton, args.frames, seed=args.seed
            )
        motion.to_json(out / "motion.json")
        _write_json(
            out / "asset.json",
            {
                "kind": args.kind,
                "mesh": "mesh.json",
                "skeleton": "skeleton.json",
                "motion": "motion.json",
            },
            prov,
        )
    elif args.kind == "two_cubes":
        save_mesh(assets.gen_two_cubes(overlap=args.overlap), out / "mesh.json")
        _write_json(out / "asset.json", {"kind": args.kind, "mesh": "mesh.json"}, prov)
    elif args.kind == "icosphere":
        save_mesh(
            assets.gen_icosphere(radius=args.radius, subdivisions=args.subdiv),
            out / "mesh.json",
        )
        _write_json(out / "asset.json", {"kind": args.kind, "mesh": "mesh.json"}, prov)
    elif args.kind == "capsule":
        save_mesh(
            assets.gen_capsule(radius=args.radius, length=args.length),
            out / "mesh.json",
        )
        _write_json(out / "asset.json", {"kind": args.kind, "mesh": "mesh.json"}, prov)
    else:
        raise ConfigError(f"unknown asset kind {args.kind!r}")
    print(f"wrote {args.kind} asset to {out}")
    return 0


def _sample_for_fit(mesh, args):
    from .sdf import SamplePlan, sample_sdf_set

    has_detail = (
        mesh.detail_vertices is not None and len(mesh.detail_vertices) > 0
    )
    n_detail = args.n_detail if has_detail else 0
    n_surface = args.n_surface + (args.n_detail - n_detail)
    plan = SamplePlan(
        n_ambient=args.n_ambient,
        n_surface=n_surface,
        n_detail=n_detail,
        surface_sigma=args.surface_sigma,
    )
    return sample_sdf_set(mesh, plan, seed=args.seed)


def cmd_fit(args) -> int:
    from .mesh import load_mesh
    from .proxy import FitConfig, fit_sphere_proxy
    from .voxel import VoxelGridSpec, proxy_quality_metrics

    mesh = load_mesh(args.mesh)
    samples = _sample_for_fit(mesh, args)
    cfg = FitConfig(
        sphere_count=args.spheres,
        lambda_emptiness=args.lambda_empty,
        lambda_is=args.lambda_is,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        lr_decay=args.lr_decay,
        lr_decay_every=args.lr_decay_every,
        seed=args.seed,
    )
    fitted, report = fit_sphere_proxy(mesh, samples, cfg)
    if args.quality:
        report.surface, report.voldev = proxy_quality_metrics(
            fitted, mesh, VoxelGridSpec(edge=args.quality_voxel, seed=args.seed)
        )
    prov = _provenance(args)
    out = Path(args.out)
    fitted.to_json(out)
    report.to_csv(Path(args.report), header_lines=_csv_header(prov))
    print(
        f"fitted {fitted.count} spheres: final L_SP {report.l_sp[-1]:.6f}, "
        f"surface {report.surface:.3f}, voldev {report.voldev:.4f}, "
        f"wall {report.wall_time:.1f}s"
    )
    return 0


def _load_rig(args):
    from .mesh import load_mesh
    from .proxy import SphereSet
    from .skinning import Motion, Skeleton, derive_sphere_blend_weights

    mesh = load_mesh(args.mesh)
    skeleton = Skeleton.from_json(args.skeleton)
    spheres = SphereSet.from_json(args.spheres_file)
    bw = derive_sphere_blend_weights(spheres, mesh, g=args.neighbors)
    motion = Motion.from_json(args.motion) if getattr(args, "motion", None) else None
    return mesh, skeleton, spheres, bw, motion


def cmd_pose(args) -> int:
    from .mesh import load_mesh, save_mesh
    from .skinning import Motion, Skeleton, pose_mesh

    mesh = load_mesh(args.mesh)
    skeleton = Skeleton.from_json(args.skeleton)
    motion = Motion.from_json(args.motion)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digits = len(str(max(len(motion) - 1, 1)))
    for f in range(len(motion)):
        posed = pose_mesh(mesh, skeleton, motion.pose(f))
        save_mesh(posed, out / f"frame_{f:0{digits}d}.{args.format}")
    print(f"wrote {len(motion)} posed meshes to {out}")
    return 0


def cmd_calibrate(args) -> int:
    from .intersection import build_pair_mask
    from .skinning import Motion

    mesh, skeleton, spheres, bw, _ = _load_rig(args)
    motions = [Motion.from_json(p) for p in args.motions]
    mask = build_pair_mask(
        spheres, bw, skeleton, motions, threshold=args.threshold
    )
    mask.to_json(args.out)
    prov = mask.provenance
    print(
        f"mask: {len(mask)} of {prov.n_pairs_total} pairs kept "
        f"(same-joint {prov.n_excluded_same_joint}, "
        f"frequent {prov.n_excluded_frequent}, "
        f"always-colliding {prov.n_always_colliding}, "
        f"always fraction {prov.always_colliding_fraction():.4f}, "
        f"excluded fraction {prov.excluded_fraction():.4f})"
    )
    return 0


def cmd_si_loss(args) -> int:
    from .intersection import PairMask, si_loss

    mesh, skeleton, spheres, bw, motion = _load_rig(args)
    mask = PairMask.from_json(args.mask)
    result = si_loss(
        spheres,
        bw,
        skeleton,
        motion,
        mask,
        want_grad_centers=args.grads,
        want_grad_pose=args.grads,
    )
    _write_json(Path(args.out), result.to_json_dict(), _provenance(args))
    print(f"{result.value:.12g}")
    return 0


def cmd_mesh_si(args) -> int:
    from .collision import mesh_si_loss
    from .mesh import load_mesh

    res = mesh_si_loss(load_mesh(args.mesh))
    payload = {
        "value": res.value,
        "colliding_pairs": res.colliding_pairs.tolist(),
        "peak_memory": res.peak_memory,
        "wall_time": res.wall_time,
        "threads": res.threads,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh)
    print(f"{res.value:.12g} ({len(res.colliding_pairs)} colliding pairs)")
    return 0


def cmd_si_metric(args) -> int:
    from .mesh import load_mesh
    from .skinning import Motion, Skeleton, pose_mesh
    from .voxel import VoxelGridSpec, si_metric

    spec = VoxelGridSpec(edge=args.voxel, rays=args.rays, seed=args.seed)
    if args.frames_dir:
        paths = sorted(Path(args.frames_dir).glob("frame_*"))
        if not paths:
            raise ConfigError(f"no frame_* meshes in {args.frames_dir}")
        meshes = [load_mesh(p) for p in paths]
    elif args.mesh and args.motion and args.skeleton:
        mesh = load_mesh(args.mesh)
        skeleton = Skeleton.from_json(args.skeleton)
        motion = Motion.from_json(args.motion)
        meshes = [
            pose_mesh(mesh, skeleton, motion.pose(f)) for f in range(len(motion))
        ]
    else:
        raise ConfigError(
            "si-metric needs --frames-dir or (--mesh, --skeleton, --motion)"
        )
    score = si_metric(meshes, spec)
    prov = _provenance(args)
    _write_json(
        Path(args.out),
        {
            "mean_volume": score.mean_volume,
            "per_frame_volumes": score.per_frame_volumes.tolist(),
            "voxel_count": score.voxel_count,
            "units": "cm^3 equivalent (unit sphere = 1 m radius)",
        },
        prov,
    )
    if args.per_frame_csv:
        lines = _csv_header(prov) + ["frame,volume_cm3"]
        for f, v in enumerate(score.per_frame_volumes):
            lines.append(f"{f},{v!r}")
        Path(args.per_frame_csv).write_text("\n".join(lines) + "\n")
    print(f"{score.mean_volume:.6f}")
    return 0


def cmd_bench(args) -> int:
    from .bench import (
        BenchConfig,
        emit_plot_data,
        plot_rows_to_csv,
        rows_to_csv,
        run_benchmark,
        summarize,
        summary_to_json,
    )
    from .intersection import PairMask
    from .skinning import pose_mesh

    mesh, skeleton, spheres, bw, motion = _load_rig(args)
    mask = PairMask.from_json(args.mask)
    methods = tuple(m.strip() for m in args.methods.split(","))
    cfg = BenchConfig(
        frame_counts=tuple(int(f) for f in args.frames.split(",")),
        include_full_motion=args.full,
        repetitions=args.reps,
        warmup=args.warmup,
        methods=methods,
        threads=args.threads,
        mesh_time_budget=args.budget,
    )
    frame_meshes = None
    if "mesh" in methods:
        frame_meshes = [
            pose_mesh(mesh, skeleton, motion.pose(f)) for f in range(len(motion))
        ]
    records, rows = run_benchmark(
        cfg, spheres, bw, skeleton, motion, mask, frame_meshes
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(args)
    rows_to_csv(rows, out / "bench.csv", header_lines=_csv_header(prov))
    plot_rows_to_csv(
        emit_plot_data(records), out / "plot_data.csv", header_lines=_csv_header(prov)
    )
    summary = summarize(records)
    summary_to_json(summary, out / "summary.json", provenance=prov)
    for rec in records:
        print(
            f"{rec.method:7s} frames={rec.frame_count:4d} "
            f"median={rec.wall_median:.4f}s peak={rec.peak_memory}B "
            f"loss={rec.loss:.6g} {rec.status}"
        )
    if "speedup_time" in summary:
        print(
            f"speedup x{summary['speedup_time']:.1f}, "
            f"memory ratio x{summary['memory_ratio_mesh_over_sphere']:.1f} "
            f"at {summary['comparison_frames']} frames"
        )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> _TrackingParser:
    parser = _TrackingParser(
        prog="sphereproxy",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", help="TOML/JSON config overlay")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument(
            "--threads", type=int, default=1, help="internal thread count"
        )

    p = sub.add_parser("gen-asset", help="generate synthetic assets")
    common(p)
    p.add_argument(
        "--kind",
        choices=["capsule_man", "two_cubes", "icosphere", "capsule"],
        default="capsule_man",
    )
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resolution", type=int, default=64,
                   help="capsule-man surface resolution")
    p.add_argument("--frames", type=int, default=196, help="motion length")
    p.add_argument("--motion", choices=["random", "contact"], default="random")
    p.add_argument("--overlap", type=float, default=0.2, help="two-cubes overlap")
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--length", type=float, default=0.6, help="capsule length")
    p.add_argument("--subdiv", type=int, default=4, help="icosphere subdivisions")
    p.set_defaults(func=cmd_gen_asset)

    p = sub.add_parser("fit", help="fit a sphere proxy to a mesh")
    common(p)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", default="spheres.json")
    p.add_argument("--report", default="fit_report.csv")
    p.add_argument("--spheres", type=int, default=_PAPER_DEFAULTS["spheres"])
    p.add_argument(
        "--lambda-empty", type=float, default=_PAPER_DEFAULTS["lambda_empty"]
    )
    p.add_argument("--lambda-is", type=float, default=_PAPER_DEFAULTS["lambda_is"])
    p.add_argument("--epochs", type=int, default=_PAPER_DEFAULTS["epochs"])
    p.add_argument("--batch", type=int, default=_PAPER_DEFAULTS["batch"])
    p.add_argument("--lr", type=float, default=_PAPER_DEFAULTS["lr"])
    p.add_argument("--lr-decay", type=float, default=_PAPER_DEFAULTS["lr_decay"])
    p.add_argument(
        "--lr-decay-every", type=int, default=_PAPER_DEFAULTS["lr_decay_every"]
    )
    p.add_argument("--n-ambient", type=int, default=20000,
                   help="ambient SDF samples (desk-scale default)")
    p.add_argument("--n-surface", type=int, default=20000)
    p.add_argument("--n-detail", type=int, default=20000,
                   help="near-surface samples in detail regions, folded into "
                        "--n-surface when the mesh has none")
    p.add_argument("--surface-sigma", type=float, default=None,
                   help="normal offset std (default: 1%% of bounding radius)")
    p.add_argument("--quality", action="store_true",
                   help="also compute Surface/VolDev after fitting")
    p.add_argument("--quality-voxel", type=float, default=0.025)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("pose", help="pose a mesh along a motion")
    common(p)
    p.add_argument("--mesh", required=True)
    p.add_argument("--skeleton", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=["obj", "json"], default="json")
    p.set_defaults(func=cmd_pose)

    def rig_args(p):
        p.add_argument("--mesh", required=True)
        p.add_argument("--skeleton", required=True)
        p.add_argument("--spheres-file", required=True)
        p.add_argument(
            "--neighbors", type=int, default=_PAPER_DEFAULTS["neighbors"],
            help="nearest vertices per sphere for blend weights",
        )

    p = sub.add_parser("calibrate", help="build the sphere pair mask")
    common(p)
    rig_args(p)
    p.add_argument("--motions", nargs="+", required=True)
    p.add_argument(
        "--threshold", type=float, default=_PAPER_DEFAULTS["threshold"]
    )
    p.add_argument("--out", default="mask.json")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("si-loss", help="self-intersection loss of a motion")
    common(p)
    rig_args(p)
    p.add_argument("--motion", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--grads", action="store_true", help="export gradients")
    p.add_argument("--out", default="si_loss.json")
    p.set_defaults(func=cmd_si_loss)

    p = sub.add_parser("mesh-si", help="mesh-based self-intersection penalty")
    common(p)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", default="mesh_si.json")
    p.set_defaults(func=cmd_mesh_si)

    p = sub.add_parser("si-metric", help="voxel self-intersection metric")
    common(p)
    p.add_argument("--frames-dir", help="directory of frame_* meshes")
    p.add_argument("--mesh", help="rest mesh to pose internally")
    p.add_argument("--skeleton")
    p.add_argument("--motion")
    p.add_argument("--voxel", type=float, default=_PAPER_DEFAULTS["voxel"])
    p.add_argument("--rays", type=int, default=3)
    p.add_argument("--out", default="si_metric.json")
    p.add_argument("--per-frame-csv", default=None)
    p.set_defaults(func=cmd_si_metric)

    p = sub.add_parser("bench", help="sphere vs mesh runtime/memory benchmark")
    common(p)
    rig_args(p)
    p.add_argument("--motion", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--frames", default="1,2,4,8,16")
    p.add_argument("--full", action=argparse.BooleanOptionalAction, default=True,
                   help="also run the full motion length")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--methods", default="sphere,mesh")
    p.add_argument("--budget", type=float, default=120.0,
                   help="mesh-method time budget in seconds")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_values = _load_config_file(args.config)
        _overlay_config(args, file_values)
        return args.func(args)
    except SphereProxyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # runtime failure after validation
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
