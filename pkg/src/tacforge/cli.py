"""tacforge command line: generate / translate / train / eval / fit-material.

Every command takes ``--config <toml> --seed <u64> --out <dir>`` style
arguments, funnels all randomness through the recorded seed, and writes
byte-deterministic outputs (PBM P4 images, CSVs, JSON manifests). Exit
codes: 0 success, 1 validation failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import dataset as ds
from . import force as force_mod
from . import imaging, mpm, scenario, signals, translate

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml


DEFAULT_CONFIG = {
    "dataset": {"id": "desk"},
    "trajectory": {"dx_mm": 3.0, "dy_mm": 4.0, "dz_mm": 0.3, "zmax_mm": 1.2,
                   "theta_deg": 30.0, "shear_mm": 1.0, "speed_mm_s": 40.0,
                   "frame_rate_hz": 150.0},
    "layout": {"kind": "cross", "directions": 1, "grid_n": 3,
               "grid_pitch_mm": 4.0},
    "indenter": {"ids": ["prism", "cylinder"]},
    "sensor": {"patterns": ["Array2"], "material_id": "default",
               "active_area_mm": 20.0},
    "material": {"youngs_modulus_pa": 1.45e5, "poisson": 0.45,
                 "density_kg_m3": 1070.0, "damping": 0.02},
    "sim": {"dx_mm": 1.0, "particles_per_cell": 8, "settle_steps": 300,
            "friction": 0.3},
}


def _merge(base, override):
    out = {k: dict(v) for k, v in base.items()}
    for sec, vals in override.items():
        out.setdefault(sec, {})
        if isinstance(vals, dict):
            out[sec].update(vals)
        else:
            out[sec] = vals
    # singular forms accepted for convenience
    ind = out.get("indenter", {})
    if "id" in ind and "ids" not in ind:
        ind["ids"] = [ind.pop("id")]
    sen = out.get("sensor", {})
    if "pattern" in sen and "patterns" not in sen:
        sen["patterns"] = [sen.pop("pattern")]
    return out


def load_generate_config(path=None):
    doc = {}
    if path:
        with open(path, "rb") as f:
            doc = _toml.load(f)
    return _merge(DEFAULT_CONFIG, doc)


def _build_plan(cfg):
    t = cfg["trajectory"]
    traj = scenario.TrajectoryConfig(
        grid_dx=t["dx_mm"], grid_dy=t["dy_mm"], depth_step=t["dz_mm"],
        max_depth=t["zmax_mm"], shear_angle=np.deg2rad(t["theta_deg"]),
        shear_distance=t["shear_mm"], speed=t["speed_mm_s"],
        frame_rate=t["frame_rate_hz"])
    lay = cfg["layout"]
    if lay["kind"] == "cross":
        points = scenario.cross_contact_points(traj.grid_dx, traj.grid_dy)
    elif lay["kind"] == "grid":
        points = scenario.grid_contact_points(lay["grid_n"], lay["grid_pitch_mm"])
    else:
        raise ValueError(f"unknown layout kind {lay['kind']!r}")
    seqs = []
    for ind_id in cfg["indenter"]["ids"]:
        scenario.get_indenter(ind_id)  # validate id
        seqs.extend(scenario.generate_trajectory(
            traj, points, lay["directions"], indenter_id=ind_id))
    return traj, seqs


def _material_from(cfg):
    m = cfg["material"]
    return mpm.MaterialParams(youngs_modulus=m["youngs_modulus_pa"],
                              poisson=m["poisson"], density=m["density_kg_m3"],
                              damping=m["damping"])


def _simcfg_from(cfg):
    s = cfg["sim"]
    return mpm.MpmConfig(grid_spacing=s["dx_mm"],
                         particles_per_cell=s["particles_per_cell"],
                         settle_steps=s["settle_steps"], friction=s["friction"],
                         dt=s.get("dt_s"))


def _simulate_one(payload):
    """Worker: run one contact sequence, return frames as plain arrays."""
    cfg, seq_dict, seed = payload
    mat = _material_from(cfg)
    simcfg = _simcfg_from(cfg)
    spec = scenario.get_indenter(seq_dict["indenter"])
    waypoints = [(scenario.Pose(np.array(p), yaw), scenario.Phase(ph))
                 for p, yaw, ph in seq_dict["waypoints"]]
    seq = scenario.ContactSequence(
        seq_dict["indenter"], waypoints, np.array(seq_dict["point"]),
        seq_dict["direction"], seq_dict["depth"])
    state = mpm.init_sim(mat, simcfg, spec, seed=seed)
    t = cfg["trajectory"]
    frames = mpm.run_contact_sequence(state, seq, speed=t["speed_mm_s"],
                                      frame_rate=t["frame_rate_hz"])
    return frames


def _seq_to_dict(seq):
    return {"indenter": seq.indenter,
            "waypoints": [(p.translation.tolist(), p.yaw, ph.value)
                          for p, ph in seq.waypoints],
            "point": seq.contact_point.tolist(),
            "direction": seq.direction, "depth": seq.depth}


def cmd_generate(args):
    cfg = load_generate_config(args.config)
    traj, seqs = _build_plan(cfg)
    if args.dry_run:
        print(f"plan: {len(seqs)} contact sequences "
              f"({len(cfg['indenter']['ids'])} indenters x "
              f"{len(seqs) // max(1, len(cfg['indenter']['ids']))} per indenter)")
        return 0
    out = args.out
    os.makedirs(out, exist_ok=True)
    patterns = {name: imaging.make_pattern(
        name, active_area=cfg["sensor"]["active_area_mm"])
        for name in cfg["sensor"]["patterns"]}
    cam = imaging.CameraMap()

    payloads = [(cfg, _seq_to_dict(s), args.seed) for s in seqs]
    failures = []
    results = [None] * len(seqs)
    workers = args.workers or min(2, os.cpu_count() or 1)
    if workers > 1 and len(seqs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {ex.submit(_simulate_one, p): i for i, p in enumerate(payloads)}
            for fut, i in futs.items():
                try:
                    results[i] = fut.result()
                except FloatingPointError as e:
                    failures.append((i, str(e)))
    else:
        for i, p in enumerate(payloads):
            try:
                results[i] = _simulate_one(p)
            except FloatingPointError as e:
                failures.append((i, str(e)))

    sim_dir = os.path.join(out, "sim")
    os.makedirs(sim_dir, exist_ok=True)
    records_per_pattern = {name: [] for name in patterns}
    for i, (seq, frames) in enumerate(zip(seqs, results)):
        if frames is None:
            continue
        seq_name = f"seq_{i:04d}"
        sdir = os.path.join(sim_dir, seq_name)
        os.makedirs(sdir, exist_ok=True)
        lattice_rels = []
        for k, fr in enumerate(frames):
            rel = os.path.join("sim", seq_name, f"lattice_{k:04d}.tfld")
            mpm.write_lattice(os.path.join(out, rel), fr.surface_displacement)
            lattice_rels.append(rel)
        forces_rel = os.path.join("sim", seq_name, "forces.csv")
        mpm.write_forces_csv(os.path.join(out, forces_rel), frames)
        phases = [fr.phase.value for fr in frames]
        samplers = [mpm.lattice_sampler(fr.surface_displacement,
                                        cfg["sensor"]["active_area_mm"])
                    for fr in frames]
        for name, pattern in patterns.items():
            pdir = os.path.join(out, name, seq_name)
            os.makedirs(pdir, exist_ok=True)
            frame_rels = []
            for k, fr in enumerate(frames):
                warped = imaging.warp_markers(pattern, samplers[k])
                img = imaging.rasterize(warped, cam)
                rel = os.path.join(name, seq_name, f"frame_{k:04d}.pbm")
                imaging.write_pbm(os.path.join(out, rel), img)
                frame_rels.append(rel)
            records_per_pattern[name].append(ds.SequenceRecord(
                seq_id=seq_name, indenter=seq.indenter,
                contact_point=seq.contact_point.tolist(),
                direction_rad=seq.direction, depth_mm=seq.depth,
                phases=phases, frames=frame_rels, forces_csv=forces_rel,
                lattices=lattice_rels))

    manifest_paths = []
    for name in patterns:
        man = ds.DatasetManifest(
            dataset_id=f"{cfg['dataset']['id']}-{name}",
            sensor={"pattern": name,
                    "material_id": cfg["sensor"]["material_id"],
                    "zmax_mm": cfg["trajectory"]["zmax_mm"],
                    "active_area_mm": cfg["sensor"]["active_area_mm"]},
            sequences=records_per_pattern[name], config=cfg, seed=args.seed,
            base_dir=out)
        mpath = os.path.join(out, f"manifest_{name}.json")
        ds.save_manifest(mpath, man)
        manifest_paths.append(mpath)
        print(f"wrote {mpath} ({len(man.sequences)} sequences)")
    if failures:
        log = os.path.join(out, "failures.log")
        with open(log, "w") as f:
            for i, msg in failures:
                f.write(f"seq_{i:04d}: {msg}\n")
        print(f"{len(failures)} sequences failed; see {log}", file=sys.stderr)
        return 2
    return 0


def _target_reference(args, active_area):
    if args.target_ref:
        return imaging.read_pbm(args.target_ref), None
    if not args.target_pattern:
        raise ValueError("need --target-pattern or --target-ref")
    pattern = imaging.make_pattern(args.target_pattern, active_area=active_area)
    return imaging.rasterize(pattern.markers), args.target_pattern


def cmd_translate(args):
    src = ds.load_manifest(args.source)
    tgt_zmax = args.target_zmax or float(src.sensor["zmax_mm"])
    tgt_area = args.target_area or float(src.sensor["active_area_mm"])
    ref_img, tgt_pattern = _target_reference(args, tgt_area)
    align = translate.DepthAlignment(
        source_zmax=float(src.sensor["zmax_mm"]), target_zmax=tgt_zmax,
        source_area=float(src.sensor["active_area_mm"]), target_area=tgt_area)

    priors = None
    if args.priors:
        table = force_mod.load_priors(args.priors)
        try:
            priors = (table[args.source_material], table[args.target_material])
        except KeyError as e:
            raise ValueError(f"material {e} not in priors file") from None

    truth = ds.load_manifest(args.truth) if args.truth else None
    out = args.out
    os.makedirs(out, exist_ok=True)
    records = []
    report_rows = []
    for i, seq in enumerate(src.sequences):
        seq_name = seq.seq_id
        sdir = os.path.join(out, seq_name)
        os.makedirs(sdir, exist_ok=True)
        ref_src = imaging.read_pbm(src.path(seq.frames[0]))
        frame_rels = []
        flagged = []
        gen_imgs = []
        for k, frel in enumerate(seq.frames):
            img = imaging.read_pbm(src.path(frel))
            try:
                gen = translate.translate_image(img, ref_src, ref_img,
                                                align=align, lam=args.lam)
            except translate.QualityGateError as e:
                gen = e.image
                flagged.append(k)
            rel = os.path.join(seq_name, f"frame_{k:04d}.pbm")
            imaging.write_pbm(os.path.join(out, rel), gen)
            frame_rels.append(rel)
            gen_imgs.append(gen)

        forces, depths, phases = ds.load_sequence_forces(src, seq)
        if priors:
            forces = force_mod.compensate_labels(
                forces, depths, phases, priors[0], priors[1],
                all_axes=not args.normal_only)
        forces_rel = os.path.join(seq_name, "forces.csv")
        frames_meta = [mpm.SimFrame(
            surface_displacement=np.zeros((1, 1, 3)), contact_force=forces[k],
            indenter_pose=np.zeros(3), depth=depths[k], phase=phases[k],
            time=0.0, frame_index=k) for k in range(len(depths))]
        mpm.write_forces_csv(os.path.join(out, forces_rel), frames_meta)

        if truth is not None:
            t_seq = truth.sequences[i]
            for k, gen in enumerate(gen_imgs):
                t_img = imaging.read_pbm(truth.path(t_seq.frames[k]))
                err = translate.marker_position_error(gen, t_img)
                iou = translate.pixel_iou(gen, t_img)
                report_rows.append([f"{seq_name}/{k}", err.mean, err.max, iou,
                                    err.matched_fraction])
        records.append(ds.SequenceRecord(
            seq_id=seq_name, indenter=seq.indenter,
            contact_point=seq.contact_point, direction_rad=seq.direction_rad,
            depth_mm=seq.depth_mm, phases=[p.value for p in phases],
            frames=frame_rels, forces_csv=forces_rel, flagged_frames=flagged))

    man = ds.DatasetManifest(
        dataset_id=f"{src.dataset_id}-to-{tgt_pattern or 'custom'}",
        sensor={"pattern": tgt_pattern or "custom",
                "material_id": args.target_material or src.sensor["material_id"],
                "zmax_mm": tgt_zmax, "active_area_mm": tgt_area},
        sequences=records,
        config={"source": src.hash, "lambda": args.lam,
                "compensated": bool(priors)},
        seed=args.seed, base_dir=out)
    mpath = os.path.join(out, f"manifest_{tgt_pattern or 'custom'}.json")
    ds.save_manifest(mpath, man)
    print(f"wrote {mpath} ({len(records)} sequences)")

    report = os.path.join(out, "translation_report.csv")
    with open(report, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "mean_err_px", "max_err_px", "iou",
                    "matched_fraction"])
        for row in report_rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    if report_rows:
        means = np.array([r[1] for r in report_rows], dtype=float)
        ious = np.array([r[3] for r in report_rows], dtype=float)
        ok = ~np.isnan(means)
        print(f"translation report: mean marker error "
              f"{means[ok].mean():.3f} px, mean IoU {ious.mean():.3f}")
    return 0


def _train_config(args):
    return force_mod.TrainConfig(
        hidden=args.hidden, epochs=args.epochs, seed=args.seed,
        max_subseq=1 if args.single_frame else None)


def cmd_train(args):
    man = ds.load_manifest(args.manifest)
    samples = ds.load_samples(man)
    model = force_mod.train(samples, _train_config(args))
    force_mod.save_model(args.out, model)
    mae = force_mod.validation_mae(model, samples,
                                   single_frame=args.single_frame)
    print(f"wrote {args.out} (training-set MAE {mae:.4f} N)")
    return 0


def cmd_eval(args):
    model = force_mod.load_model(args.model)
    man = ds.load_manifest(args.manifest)
    samples = ds.load_samples(man)
    rep = force_mod.evaluate(model, samples, single_frame=args.single_frame)
    rows = [("Fx", rep.mae[0], rep.r2[0]), ("Fy", rep.mae[1], rep.r2[1]),
            ("Fz", rep.mae[2], rep.r2[2]), ("Ftotal", rep.total_mae, rep.r2_total)]
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["axis", "mae_N", "r2"])
        for axis, mae, r2 in rows:
            w.writerow([axis, repr(float(mae)),
                        "" if r2 is None else repr(float(r2))])
    for axis, mae, r2 in rows:
        r2s = "undefined" if r2 is None else f"{r2:.4f}"
        print(f"{axis:6s} MAE {mae:.4f} N   R2 {r2s}")
    return 0


def _read_material_csv(path):
    samples = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header == ["depth_mm", "fz_N", "phase"]:
            for row in r:
                if row:
                    samples.append((float(row[0]), float(row[1]), row[2]))
        elif header == mpm._FORCE_COLS:
            for row in r:
                if row:
                    samples.append((float(row[3]), float(row[6]), row[2]))
        else:
            raise ValueError(f"unsupported force CSV header in {path}")
    if not samples:
        raise ValueError(f"no samples in {path}")
    return samples


def cmd_fit_material(args):
    samples = []
    for path in args.forces:
        samples.extend(_read_material_csv(path))
    prior = force_mod.fit_material_prior(samples, args.material_id)
    replaced = force_mod.upsert_prior(args.out, prior)
    if replaced:
        print(f"warning: replaced existing prior for {args.material_id}",
              file=sys.stderr)
    print(f"{args.material_id}: loading rms {prior.rms_loading:.4f} N, "
          f"unloading rms {prior.rms_unloading:.4f} N, d_max {prior.d_max} mm")
    return 0


def cmd_translate_taxel(args):
    frames = signals.read_taxel_log(args.log)
    if not (0 <= args.baseline_row < len(frames)):
        raise ValueError("baseline row out of range")
    baseline = frames[args.baseline_row]
    os.makedirs(args.out, exist_ok=True)
    index_rows = []
    for k, fr in enumerate(frames):
        markers = signals.taxel_to_markers(fr, baseline)
        img = imaging.BinaryTactileImage(
            imaging.rasterize_px(markers.centroids, markers.radii))
        rel = f"frame_{k:04d}.pbm"
        imaging.write_pbm(os.path.join(args.out, rel), img)
        index_rows.append([k, repr(float(fr.timestamp)), rel])
    with open(os.path.join(args.out, "frames.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "timestamp_s", "path"])
        w.writerows(index_rows)
    print(f"wrote {len(frames)} taxel frames to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tacforge",
                                description="tactile force transfer workbench")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="simulate contact datasets")
    g.add_argument("--config", help="generation TOML")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=0)
    g.add_argument("--dry-run", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("translate", help="translate a dataset across patterns")
    t.add_argument("--source", required=True, help="source manifest JSON")
    t.add_argument("--target-pattern")
    t.add_argument("--target-ref", help="target reference PBM")
    t.add_argument("--target-zmax", type=float)
    t.add_argument("--target-area", type=float)
    t.add_argument("--target-material")
    t.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    t.add_argument("--priors", help="priors CSV enabling compensation")
    t.add_argument("--source-material")
    t.add_argument("--normal-only", action="store_true",
                   help="compensate F_z only")
    t.add_argument("--truth", help="target-truth manifest for the report")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_translate)

    tr = sub.add_parser("train", help="train a force model on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--epochs", type=int, default=240)
    tr.add_argument("--hidden", type=int, default=16)
    tr.add_argument("--single-frame", action="store_true")
    tr.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a model against a manifest")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--single-frame", action="store_true")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("fit-material", help="fit force-depth priors")
    f.add_argument("--forces", nargs="+", required=True)
    f.add_argument("--material-id", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_fit_material)

    x = sub.add_parser("translate-taxel", help="taxel log -> marker images")
    x.add_argument("--log", required=True)
    x.add_argument("--baseline-row", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_translate_taxel)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
