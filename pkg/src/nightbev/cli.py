"""Command-line entry point.

Exit codes: 0 on success, 2 on validation errors (bad configs, malformed or
missing files), 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import write_raw_tensor
from .formats import read_ppm, write_pgm, write_ppm
from .geometry import field_to_tensor, illumination_field
from .guided_sampling import build_guidance, generate_offsets, guided_warp, modulate_offsets
from .illumination import estimate_illumination, illumination_factor, load_illumination
from .pipeline import (
    PipelineConfig,
    StageError,
    build_params,
    encode_image,
    eval_batch,
    offset_magnitude,
    population_factors,
    resolve_t_star,
    run_pipeline,
)
from .scene import SceneConfig, gen_scene, load_scene, save_scene
from .selective import FactorPopulation, factor_histogram, otsu_threshold, selective_enhance


def _write_json(obj: dict, path: Path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_gen_scene(args) -> int:
    with open(args.config, "r", encoding="ascii") as fh:
        obj = json.load(fh)
    if args.seed is not None:
        obj = {**obj, "seed": args.seed}
    bundle = gen_scene(SceneConfig.from_dict(obj))
    save_scene(bundle, _out_dir(args))
    print(f"scene written to {args.out}")
    return 0


def _cmd_enhance(args) -> int:
    pc = PipelineConfig.from_json_file(args.config, seed_override=args.seed)
    out = _out_dir(args)
    image = read_ppm(args.image)
    if args.illum:
        illum = load_illumination(args.illum, pc.estimator.floor)
    else:
        illum = estimate_illumination(image, pc.estimator)
    t_star = resolve_t_star(pc)
    lam = illumination_factor(illum)
    enhanced_img, enhanced = selective_enhance(image, illum, t_star)
    write_ppm(enhanced_img, out / "enhanced.ppm")
    write_pgm(illum, out / "illumination.pgm")
    write_raw_tensor(illum, out / "illumination.rt", dtype="f32")
    _write_json(
        {"lambda": lam, "t_star": t_star, "enhanced": enhanced},
        out / "enhance_report.json",
    )
    print(f"lambda={lam:.6f} t_star={t_star:.6f} enhanced={enhanced}")
    return 0


def _cmd_threshold(args) -> int:
    factors = np.array(population_factors(args.maps))
    pop = FactorPopulation(factors, bins=args.bins)
    report = otsu_threshold(pop)
    out = _out_dir(args)
    _write_json(
        {
            "t_star": report.t_star,
            "sigma_b2": report.sigma_b2,
            "n_images": int(factors.size),
            "degenerate": report.degenerate,
            "histogram": [int(c) for c in factor_histogram(factors, args.bins)],
        },
        out / "threshold.json",
    )
    print(f"t_star={report.t_star:.6f} sigma_b2={report.sigma_b2:.6g} n={factors.size}")
    return 0


def _prepare_front(pc: PipelineConfig, scene_dir):
    bundle = load_scene(scene_dir)
    if pc.illumination_file is not None:
        illum = load_illumination(pc.illumination_file, pc.estimator.floor)
    else:
        illum = estimate_illumination(bundle.image, pc.estimator)
    enhanced_img, _ = selective_enhance(bundle.image, illum, resolve_t_star(pc))
    return bundle, illum, enhanced_img


def _cmd_igs(args) -> int:
    pc = PipelineConfig.from_json_file(args.config, seed_override=args.seed)
    out = _out_dir(args)
    bundle, illum, enhanced_img = _prepare_front(pc, args.scene)
    params = build_params(pc, len(bundle.classes), bundle.bev.nz)
    f_img = encode_image(enhanced_img, params.enc1, params.enc2)
    i_prime, g = build_guidance(illum, f_img.height, f_img.width, pc.estimator.floor)
    dp, dw = generate_offsets(i_prime, params.igs_conv, pc.igs_k)
    dp_mod = modulate_offsets(dp, g)
    warped = guided_warp(f_img, dp_mod, dw, params.igs_point_weights)
    write_pgm(g, out / "guidance.pgm")
    write_pgm(offset_magnitude(dp_mod), out / "offset_mag.pgm")
    write_raw_tensor(warped, out / "f_warped.rt", dtype="f32")
    print(f"guided sampling artifacts written to {args.out}")
    return 0


def _cmd_illum_field(args) -> int:
    pc = PipelineConfig.from_json_file(args.config, seed_override=args.seed)
    out = _out_dir(args)
    bundle = load_scene(args.scene)
    if pc.illumination_file is not None:
        illum = load_illumination(pc.illumination_file, pc.estimator.floor)
    else:
        illum = estimate_illumination(bundle.image, pc.estimator)
    field = illumination_field(illum, bundle.camera, bundle.bev, pc.n_z)
    write_raw_tensor(field_to_tensor(field), out / "s_field.rt", dtype="f32")
    write_pgm(field, out / "s_field.pgm")
    print(f"illumination field written to {args.out}")
    return 0


def _cmd_pipeline(args) -> int:
    pc = PipelineConfig.from_json_file(args.config, seed_override=args.seed)
    bundle = load_scene(args.scene)
    report = run_pipeline(
        pc, bundle, _out_dir(args), dump_intermediates=args.dump_intermediates
    )
    print(
        f"enhanced={report.enhanced} lambda={report.lam:.4f} "
        f"total_loss={report.total:.4f} ce_per_voxel={report.ce_per_voxel:.4f} "
        f"miou={report.iou.miou:.4f}"
    )
    return 0


def _cmd_eval(args) -> int:
    pc = PipelineConfig.from_json_file(args.config, seed_override=args.seed)
    scenes_root = Path(args.scenes)
    if not scenes_root.is_dir():
        raise ValueError(f"scene directory missing: {scenes_root}")
    scene_dirs = sorted(
        p for p in scenes_root.iterdir() if p.is_dir() and (p / "scene.json").is_file()
    )
    if (scenes_root / "scene.json").is_file():
        scene_dirs = [scenes_root]
    aggregate = eval_batch(scene_dirs, pc, _out_dir(args))
    print(f"aggregate miou={aggregate.miou:.4f} over {len(scene_dirs)} scene(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nightbev",
        description="Illumination-guided nighttime BEV occupancy pipeline (desk scale)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True):
        if config:
            p.add_argument("--config", required=True, help="JSON config file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("gen-scene", help="generate a synthetic night scene")
    common(p)
    p.set_defaults(fn=_cmd_gen_scene)

    p = sub.add_parser("enhance", help="selective enhancement of one image")
    common(p)
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--illum", default=None, help="optional illumination map file")
    p.set_defaults(fn=_cmd_enhance)

    p = sub.add_parser("threshold", help="derive the enhancement threshold")
    p.add_argument("--maps", required=True, help="directory of illumination maps")
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_threshold)

    p = sub.add_parser("igs", help="dump guided-sampling intermediates")
    common(p)
    p.add_argument("--scene", required=True, help="scene directory")
    p.set_defaults(fn=_cmd_igs)

    p = sub.add_parser("illum-field", help="dump the BEV illumination field")
    common(p)
    p.add_argument("--scene", required=True, help="scene directory")
    p.set_defaults(fn=_cmd_illum_field)

    p = sub.add_parser("pipeline", help="run the full pipeline on one scene")
    common(p)
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--dump-intermediates", action="store_true")
    p.set_defaults(fn=_cmd_pipeline)

    p = sub.add_parser("eval", help="evaluate the pipeline over many scenes")
    common(p)
    p.add_argument("--scenes", required=True, help="directory of scene directories")
    p.set_defaults(fn=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
