"""Command-line entry point: ``perfmap <subcommand> ...``.

Exit status is 0 on success, 2 on invalid input or parameters, 1 on any
other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .diffusion import DiffusionParams, perona_malik
from .dsa import subtract_normalize
from .eikonal import DEFAULT_EPSILON, build_speed, fast_march
from .errors import PerfmapError, ValidationError
from .evaluation import compare_maps
from .glm import (
    COLUMNS,
    CohortTable,
    DesignMatrix,
    load_cohort_volumes,
    run_glm,
    write_clusters_csv,
)
from .phantom import PhantomSpec, generate_phantom
from .pipeline import (
    PipelineConfig,
    read_batch,
    read_key_values,
    run_batch,
    run_pipeline,
)
from .vesselseg import SeedSet, binarize, extract_seeds, thin3d
from .volume import gaussian_smooth, load_mask, load_nifti, save_nifti

log = logging.getLogger("perfmap")


def _floats(text):
    return tuple(float(v) for v in text.split(","))


# ---------------------------------------------------------------- handlers


def cmd_dsa(args):
    ct = load_nifti(args.ct)
    cta = load_nifti(args.cta)
    save_nifti(subtract_normalize(cta, ct), args.out)


def cmd_enhance(args):
    params = DiffusionParams(args.iterations, args.time_step, args.conductance)
    save_nifti(perona_malik(load_nifti(args.input), params), args.out)


def cmd_segment(args):
    save_nifti(binarize(load_nifti(args.input), args.threshold), args.out)


def cmd_skeletonize(args):
    save_nifti(thin3d(load_mask(args.input)), args.out)


def cmd_seeds(args):
    seeds = extract_seeds(load_mask(args.skeleton), load_nifti(args.vsp), args.quantile, args.population)
    seeds.write_csv(args.out)
    print(f"{len(seeds)} seeds written to {args.out}")


def cmd_fastmarch(args):
    dsa = load_nifti(args.speed)
    seeds = SeedSet.read_csv(args.seeds, dsa.geometry)
    arrival = fast_march(build_speed(dsa, args.epsilon), seeds, init_radius=args.init_radius)
    save_nifti(arrival.arrival, args.out)


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    return cfg.replace(
        threshold=args.threshold,
        seed_quantile=args.quantile,
        seed_population=args.population,
        iterations=args.iterations,
        time_step=args.time_step,
        conductance=args.conductance,
        epsilon=args.epsilon,
        init_radius=args.init_radius,
        output_dir=args.out_dir,
        keep_intermediates=True if args.keep_intermediates else None,
    )


def cmd_pipeline(args):
    cfg = _pipeline_config(args)
    cfg.validate()
    if args.batch:
        results = run_batch(read_batch(args.batch), cfg, args.jobs)
        w = csv.writer(sys.stdout)
        w.writerow(["subject_id", "status", "ppm_sha256"])
        w.writerows(results)
        if any(status != "ok" for _, status, _ in results):
            return 1
        return 0
    if not (args.ct and args.cta):
        raise ValidationError("pipeline needs --ct and --cta, or --batch")
    ppm, _ = run_pipeline(args.ct, args.cta, cfg)
    print(ppm)
    return 0


def cmd_compare(args):
    ppm = load_nifti(args.ppm)
    ref = load_nifti(args.reference)
    mask = load_mask(args.mask) if args.mask else None
    report = compare_maps(ppm, ref, mask, args.fwhm, smooth=not args.no_smooth, units=args.units)
    row = report.as_row()
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)
    w = csv.DictWriter(sys.stdout, fieldnames=list(row))
    w.writeheader()
    w.writerow(row)
    if args.png:
        from .plotting import render_comparison

        if args.no_smooth:
            render_comparison(ppm, ref, args.png)
        else:
            render_comparison(
                gaussian_smooth(ppm, args.fwhm, args.units),
                gaussian_smooth(ref, args.fwhm, args.units),
                args.png,
                fwhm=args.fwhm,
            )


def cmd_glm(args):
    cohort = CohortTable.read_csv(args.cohort)
    design = DesignMatrix.from_cohort(cohort, _floats(args.contrast))
    volumes = load_cohort_volumes(cohort)
    if args.smooth:
        volumes = [gaussian_smooth(v, args.smooth) for v in volumes]
    mask = load_mask(args.mask) if args.mask else None
    result = run_glm(
        volumes,
        design,
        n_perm=args.n_perm,
        alpha=args.alpha,
        min_extent=args.extent,
        rng_seed=args.seed,
        two_sided=args.two_sided,
        mask=mask,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, beta in zip(COLUMNS, result.beta):
        save_nifti(beta, out / f"beta_{name}.nii.gz")
    save_nifti(result.t_map, out / "tmap.nii.gz")
    save_nifti(result.significant_mask, out / "significant_mask.nii.gz")
    write_clusters_csv(result.clusters, out / "clusters.csv")
    summary = {
        "n_subjects": len(cohort),
        "contrast": list(design.contrast),
        "n_perm": args.n_perm,
        "alpha": args.alpha,
        "extent": args.extent,
        "seed": args.seed,
        "two_sided": args.two_sided,
        "input_smoothing_fwhm": args.smooth or 0.0,
        "fwe_threshold": result.fwe_threshold,
        "n_clusters": len(result.clusters),
    }
    with open(out / "glm_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    if args.png:
        from .plotting import render_orthogonal

        peak = result.clusters[0].peak_index if result.clusters else None
        render_orthogonal(result.t_map, out / "tmap.png", title="t statistic", index=peak)
    print(json.dumps(summary))


def cmd_phantom(args):
    values = {}
    if args.spec:
        spec_path = Path(args.spec)
        if spec_path.is_file():
            values = read_key_values(spec_path)
        else:
            for item in args.spec.split(";"):
                if item.strip():
                    key, _, val = item.partition("=")
                    values[key.strip()] = val.strip()
    bundle = generate_phantom(PhantomSpec.from_mapping(values))
    paths = bundle.write(args.out_dir)
    for key, p in paths.items():
        print(f"{key}: {p}")


def cmd_render(args):
    from .plotting import render_orthogonal

    vol = load_nifti(args.input)
    render_orthogonal(vol, args.out, title=args.title or Path(args.input).name, cmap=args.cmap)


# ---------------------------------------------------------------- parser


def _diffusion_flags(p, defaults: bool):
    d = DiffusionParams()
    p.add_argument("--iterations", type=int, default=d.iterations if defaults else None,
                   help=f"diffusion iterations (default {d.iterations})")
    p.add_argument("--time-step", type=float, default=d.time_step if defaults else None,
                   help=f"explicit time step, at most 1/16 in 3D (default {d.time_step})")
    p.add_argument("--conductance", type=float, default=d.conductance if defaults else None,
                   help=f"conductance kappa in normalised intensity units (default {d.conductance})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perfmap", description="Predicted perfusion maps from plain CT and CT angiography."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dsa", help="normalised subtraction CTA - CT")
    p.add_argument("--ct", required=True)
    p.add_argument("--cta", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dsa)

    p = sub.add_parser("enhance", help="Perona-Malik diffusion of the DSA (produces the VSP)")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _diffusion_flags(p, defaults=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("segment", help="binarise the VSP")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.2,
                   help="vessel if VSP is strictly higher than this (default 0.2)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("skeletonize", help="3D thinning of a vessel mask")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_skeletonize)

    p = sub.add_parser("seeds", help="select seed voxels on the skeleton")
    p.add_argument("--skeleton", required=True)
    p.add_argument("--vsp", required=True)
    p.add_argument("--out", required=True, help="CSV of i,j,k rows")
    p.add_argument("--quantile", type=float, default=0.75,
                   help="seed if VSP is greater than this percentile (default 0.75)")
    p.add_argument("--population", choices=("skeleton", "volume"), default="skeleton",
                   help="voxels over which the percentile is taken")
    p.set_defaults(func=cmd_seeds)

    p = sub.add_parser("fastmarch", help="time of arrival from seeds through the DSA speed")
    p.add_argument("--speed", required=True, help="DSA volume used as speed potential")
    p.add_argument("--seeds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help="speed floor")
    p.add_argument("--init-radius", type=float, default=0.0,
                   help="mm around each seed fixed to straight-line travel time (default 0)")
    p.set_defaults(func=cmd_fastmarch)

    p = sub.add_parser("pipeline", help="CT + CTA to PPM in one run")
    p.add_argument("--ct")
    p.add_argument("--cta")
    p.add_argument("--batch", help="CSV with subject_id, ct, cta columns")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for --batch")
    p.add_argument("--out-dir")
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--threshold", type=float, help="vessel threshold (default 0.2)")
    p.add_argument("--quantile", type=float, help="seed percentile (default 0.75)")
    p.add_argument("--population", choices=("skeleton", "volume"))
    p.add_argument("--epsilon", type=float, help="speed floor (default 1e-3)")
    p.add_argument("--init-radius", type=float)
    _diffusion_flags(p, defaults=False)
    p.add_argument("--keep-intermediates", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("compare", help="Spearman agreement of a PPM with a reference map")
    p.add_argument("--ppm", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mask")
    p.add_argument("--fwhm", type=float, default=10.0,
                   help="Gaussian kernel FWHM applied to both maps (default 10)")
    p.add_argument("--units", choices=("voxel", "mm"), default="voxel")
    p.add_argument("--no-smooth", action="store_true")
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--png", help="write smoothed mid-slice renders here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("glm", help="voxelwise GLM with permutation FWE and cluster extent")
    p.add_argument("--cohort", required=True,
                   help="CSV with subject_id, ppm_path, score, age, gender")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--contrast", default="0,1,0,0",
                   help="weights over intercept,score,age,gender")
    p.add_argument("--n-perm", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--extent", type=int, default=100, help="minimum cluster size in voxels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--two-sided", action="store_true")
    p.add_argument("--mask")
    p.add_argument("--smooth", type=float, help="smooth inputs with this FWHM (voxels) first")
    p.add_argument("--png", action="store_true", help="also render the t map")
    p.set_defaults(func=cmd_glm)

    p = sub.add_parser("phantom", help="synthetic CT/CTA with a known vessel tree")
    p.add_argument("--spec", help="key=value file, or 'key=value;key=value'")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("render", help="PNG of orthogonal mid-slices")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.add_argument("--cmap", default="RdBu_r")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        code = args.func(args)
    except ValidationError as exc:
        print(f"perfmap {args.command}: {exc}", file=sys.stderr)
        return 2
    except (PerfmapError, OSError) as exc:
        print(f"perfmap {args.command}: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
