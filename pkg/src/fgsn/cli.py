"""Command-line entry point: ``fgsn <command> [options]``.

Commands
--------
simulate   synthetic scene, trajectory, query observations and training pairs
cluster    k-means cluster labels for a set of feature maps
train      toy segmentation head with periodic re-clustering
infer      patch-blended dense prediction with a trained head
localize   per-query pose estimation (plain, ssmc, gsmc, pfsl)
evaluate   recall table, inlier CDFs, NMI and contingency tables, figures

Every option can also come from a ``RunConfig`` container passed with
``--config``; explicit flags win over the file, which wins over defaults.
Exit codes: 0 success, 1 usage error, 2 data or validation error, 3
internal failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import clustering, evaluation, geometry, inference, localization, model, simulation, training

log = logging.getLogger("fgsn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
LOCALIZE_METHODS = ("plain", "ssmc", "gsmc", "pfsl")
RESULT_COLUMNS = ("query_id", "method", "position_error_m", "rotation_error_deg", "inlier_count", "inlier_ratio")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _existing_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise DataError(f"{what} {path} does not exist or is not a directory")
    return path


def _out_file(path) -> Path:
    path = Path(path)
    _existing_dir(path.parent if str(path.parent) else Path("."), "output directory")
    return path


def _write(path: Path, text: str) -> None:
    path.write_text(text, newline="")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(a) -> str:
    out = _existing_dir(Path(a.out), "output directory")
    scene = simulation.gen_scene(
        simulation.SceneSpec(num_points=a.points, k_fine=a.k_fine, k_coarse=a.k_coarse, label_concentration=a.label_concentration, seed=a.seed)
    )
    noise = simulation.NoiseSpec(
        pixel_noise_px=a.pixel_noise,
        outlier_rate=a.outlier_rate,
        mislabel_base=a.mislabel_base,
        mislabel_slope=a.mislabel_slope,
        max_features=a.max_features,
        boundary_jitter_px=a.jitter,
    )
    traj = simulation.gen_trajectory(a.length, a.step, a.seed, curvature=a.curvature)
    cam = simulation.DEFAULT_CAMERA

    model.save_artifact(out / "scene.json", scene.cloud)
    model.save_artifact(out / "scene_coarse.json", scene.coarse)
    model.save_artifact(out / "camera.json", cam)
    model.save_artifact(out / "trajectory.json", traj)
    model.save_artifact(out / "noise.json", model.RunConfig({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(noise).items()}))
    qdir = out / "queries"
    qdir.mkdir(exist_ok=True)
    n_matches = 0
    for i, pose in enumerate(traj.poses()):
        obs = simulation.gen_observations(scene.cloud, cam, pose, noise, a.k_fine, seed=simulation._query_seed(a.seed, i))
        model.save_artifact(qdir / f"q{i:04d}.matches.json", obs.matches)
        model.save_artifact(qdir / f"q{i:04d}.pose.json", pose)
        model.save_artifact(qdir / f"q{i:04d}.lmap", obs.labels)
        n_matches += len(obs.matches)

    tdir = out / "train"
    tdir.mkdir(exist_ok=True)
    data = simulation.gen_training_pairs(scene.coarse, traj, a.train_pairs, a.feature_dim, a.seed)
    for image_id, fmap in data.features.items():
        model.save_artifact(tdir / f"{image_id}.fmap", fmap)
    for image_id, lm in data.classes.items():
        model.save_artifact(tdir / f"{image_id}.classes.lmap", lm)
    model.save_artifact(tdir / "correspondences.json", data.samples)
    return f"simulate: {len(scene.cloud)} points, k_fine={a.k_fine}, {len(traj)} queries, {n_matches} matches, {len(data.samples)} training pairs -> {out}"


# ---------------------------------------------------------------------------
# cluster / train / infer
# ---------------------------------------------------------------------------


def _load_training_dir(path: Path):
    _existing_dir(path, "training data directory")
    corr_file = path / "correspondences.json"
    if not corr_file.is_file():
        raise DataError(f"{corr_file} not found")
    samples = model.load_artifact(corr_file)
    if not isinstance(samples, list) or not samples:
        raise DataError(f"{corr_file} holds no correspondence samples")
    ids = sorted({s.ref_image_id for s in samples} | {s.tgt_image_id for s in samples})
    features = {}
    for image_id in ids:
        f = path / f"{image_id}.fmap"
        if not f.is_file():
            raise DataError(f"feature map {f} not found")
        features[image_id] = model.load_artifact(f, "feature")
    return features, samples


def cmd_cluster(a) -> str:
    out = _existing_dir(Path(a.out), "output directory")
    features, samples = _load_training_dir(Path(a.data))
    ids = sorted(features)
    corr = {i: [] for i in ids}
    for s in samples:
        corr[s.ref_image_id].append(s.ref_points)
        corr[s.tgt_image_id].append(s.tgt_points)
    pixels = [np.concatenate(corr[i]) if corr[i] else np.empty((0, 2), dtype=np.int64) for i in ids]
    maps = [features[i] for i in ids]
    picked = clustering.sample_features(maps, pixels, a.samples, a.seed)
    wt = clustering.fit_whiten(picked, min(a.pca_dim, maps[0].dim, len(picked) - 1))
    km = clustering.kmeans_restarts(wt.apply(picked.vectors), a.k, a.restarts, a.max_iters, a.seed)
    model.save_artifact(out / "whiten.json", wt)
    model.save_artifact(out / "centroids.json", km.centroids)
    for i, fmap in zip(ids, maps):
        model.save_artifact(out / f"{i}.lmap", clustering.assign_labels(fmap, wt, km.centroids))
    return f"cluster: {len(ids)} feature maps, k={a.k}, objective {km.objective:.6g} -> {out}"


def _train_config(a) -> training.TrainConfig:
    return training.TrainConfig(
        learning_rate=a.learning_rate,
        recluster_interval=a.recluster_interval,
        total_iterations=a.iterations,
        no_recluster_reset=a.no_recluster_reset,
        seed=a.seed,
        num_clusters=a.k,
        hidden_dims=[a.hidden],
        pca_dim=a.pca_dim,
    )


def cmd_train(a) -> str:
    out = _existing_dir(Path(a.out), "output directory")
    features, samples = _load_training_dir(Path(a.data))
    for s in samples:
        s.check_bounds(features[s.ref_image_id].data.shape[:2], features[s.tgt_image_id].data.shape[:2])
    config = _train_config(a)
    result = training.train_loop(lambda i: features[i], samples, config)
    model.save_artifact(out / "head.json", result.head)
    model.save_artifact(out / "train_config.json", config)
    _write(out / "loss_trace.csv", result.loss_trace_csv())
    _write(out / "validation.csv", "iteration,val_L_corr\n" + "".join(f"{i},{v!r}\n" for i, v in result.val_history))
    _, wt, cents = max((h for h in result.centroid_history if h[0] <= result.best_iteration), key=lambda h: h[0])
    model.save_artifact(out / "whiten.json", wt)
    model.save_artifact(out / "centroids.json", cents)
    last = result.loss_trace[-1]
    return f"train: {config.total_iterations} iterations, final L={last[3]:.4f}, best validation at {result.best_iteration} -> {out}"


def cmd_infer(a) -> str:
    head = model.load_artifact(a.head)
    if not isinstance(head, training.ToyHead):
        raise DataError(f"{a.head} does not hold a ToyHead")
    fmap = model.load_artifact(a.features, "feature")
    if fmap.dim != head.input_dim:
        raise DataError(f"feature dim {fmap.dim} does not match head input dim {head.input_dim}")
    spec = inference.TileSpec(a.patch, a.stride, a.core)
    scores = inference.blend_predict(fmap, lambda x: training.softmax(head.forward(x)), spec)
    out = _out_file(a.out)
    model.save_artifact(out, scores)
    labels_out = out.with_suffix(".lmap")
    model.save_artifact(labels_out, scores.argmax())
    return f"infer: {fmap.height}x{fmap.width} -> {out} and {labels_out}"


# ---------------------------------------------------------------------------
# localize
# ---------------------------------------------------------------------------


def _load_queries(qdir: Path):
    _existing_dir(qdir, "query directory")
    ids = sorted(p.name.split(".")[0] for p in qdir.glob("q*.matches.json"))
    if not ids:
        raise DataError(f"no q*.matches.json files in {qdir}")
    out = []
    for q in ids:
        matches = model.load_artifact(qdir / f"{q}.matches.json")
        labels = model.load_artifact(qdir / f"{q}.lmap", "label")
        pose = model.load_artifact(qdir / f"{q}.pose.json")
        out.append((int(q[1:]), simulation.Observation(matches, labels, pose)))
    return out


def _results_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(RESULT_COLUMNS) + "\n")
    for r in rows:
        buf.write(f"{r.query_id},{r.method},{r.position_error_m!r},{r.rotation_error_deg!r},{r.inlier_count},{r.inlier_ratio!r}\n")
    return buf.getvalue()


def _localize_pfsl(a, cloud, camera, queries, bench) -> list:
    traj_path = Path(a.trajectory) if a.trajectory else Path(a.queries).parent / "trajectory.json"
    traj = model.load_artifact(traj_path)
    if not isinstance(traj, simulation.Trajectory) or len(traj) != len(queries):
        raise DataError(f"{traj_path} must hold a trajectory with one state per query")
    # stationary classes: labels under matched pixels versus all rendered pixels
    corr = np.concatenate([localization.match_labels(obs.matches, obs.labels) for _, obs in queries])
    pix = np.concatenate([obs.labels.labels[obs.labels.labels < cloud.num_classes] for _, obs in queries])
    stats = localization.ClassFrequencyStats.from_counts(corr[corr < cloud.num_classes], pix, cloud.num_classes)
    stationary = localization.select_stationary(stats, bench.stationary_threshold)
    mask = np.isin(cloud.labels, sorted(stationary))
    rng = np.random.default_rng([a.seed, 11])
    used = np.flatnonzero(mask)
    if len(used) > bench.pfsl_points:
        used = np.sort(rng.choice(used, size=bench.pfsl_points, replace=False))
    point_mask = np.zeros(len(cloud), dtype=bool)
    point_mask[used] = True
    cfg = localization.PFSLConfig(a.odometry_std_xy, a.odometry_std_theta, a.sharpness, traj.camera_height)
    particles = localization.ParticleSet.gaussian(traj.states[0], bench.pfsl_init_std_xy, bench.pfsl_init_std_theta, a.particles, rng)
    step_rng = np.random.default_rng([a.seed, 13])
    rows = []
    for i in range(1, len(traj)):
        odo = traj.odometry[i - 1] + rng.normal(size=3) * np.array([a.odometry_std_xy, a.odometry_std_xy, a.odometry_std_theta])
        particles = localization.pfsl_step(particles, odo, queries[i][1].labels, cloud, camera, point_mask, cfg, step_rng)
        est, truth = particles.mean(), traj.states[i]
        pos = float(np.hypot(est[0] - truth[0], est[1] - truth[1]))
        rot = float(np.degrees(abs((est[2] - truth[2] + np.pi) % (2 * np.pi) - np.pi)))
        rows.append(simulation.QueryResult(queries[i][0], "pfsl", pos, rot, 0, 0.0))
    return rows


def cmd_localize(a) -> str:
    cloud = model.load_artifact(a.scene)
    if not isinstance(cloud, model.LabeledPointCloud):
        raise DataError(f"{a.scene} does not hold a LabeledPointCloud")
    cam_path = Path(a.camera) if a.camera else Path(a.scene).parent / "camera.json"
    camera = model.load_artifact(cam_path)
    queries = _load_queries(Path(a.queries))
    out = _out_file(a.out)
    bench = simulation.BenchmarkConfig(
        camera=camera,
        ransac_iterations=a.iterations,
        inlier_threshold_px=a.threshold,
        ratio_threshold=a.ratio,
        gsmc_yaw_samples=a.yaw_samples,
        gsmc_score_points=a.score_points,
        pfsl_particles=a.particles,
        pfsl_sharpness=a.sharpness,
    )
    if a.method == "pfsl":
        rows = _localize_pfsl(a, cloud, camera, queries, bench)
    else:
        rows = []
        for qid, obs in queries:
            if obs.labels.num_classes != cloud.num_classes + 1:
                raise DataError(f"query {qid}: label map has {obs.labels.num_classes} classes, expected {cloud.num_classes + 1}")
            rows.append(simulation.run_query(a.method, cloud, obs, bench, simulation._query_seed(a.seed, qid, 1), qid, a.ground_z))
    _write(out, _results_csv(rows))
    recall = evaluation.recall_table([(r.position_error_m, r.rotation_error_deg) for r in rows])
    return f"localize: {a.method} on {len(rows)} queries, recall {evaluation.format_recall(recall)} -> {out}"


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def read_results(path) -> dict:
    """Results CSV to ``{method: [(query_id, pos, rot, inlier_count, inlier_ratio)]}``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"results file {path} not found")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        rows: dict = {}
        for n, r in enumerate(reader, start=2):
            try:
                rows.setdefault(r["method"], []).append(
                    (int(r["query_id"]), float(r["position_error_m"]), float(r["rotation_error_deg"]), int(r["inlier_count"]), float(r["inlier_ratio"]))
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path} line {n}: {exc}") from exc
    return rows


def cmd_evaluate(a) -> str:
    from . import plotting  # matplotlib is only needed here

    out = _existing_dir(Path(a.out), "output directory")
    rows: dict = {}
    for path in a.results:
        for method, vals in read_results(path).items():
            name = method if method not in rows else f"{method}@{Path(path).stem}"
            rows[name] = vals
    if not rows or not any(rows.values()):
        raise DataError("results are empty")
    recall = {m: evaluation.recall_table([(p, r) for _, p, r, _, _ in v]) for m, v in rows.items()}
    table = evaluation.recall_text_table(recall)
    _write(out / "recall.txt", table)
    _write(out / "recall.csv", evaluation.recall_csv(recall))
    count_cdf = {m: evaluation.inlier_cdf([c for *_, c, _ in v]) for m, v in rows.items()}
    ratio_cdf = {m: evaluation.inlier_cdf([r for *_, r in v]) for m, v in rows.items()}
    _write(out / "inlier_count_cdf.csv", evaluation.cdf_csv(count_cdf))
    _write(out / "inlier_ratio_cdf.csv", evaluation.cdf_csv(ratio_cdf))
    plotting.plot_cdfs(count_cdf, out / "inlier_count_cdf.png", "inlier count", "Inlier count")
    plotting.plot_cdfs(ratio_cdf, out / "inlier_ratio_cdf.png", "inlier ratio", "Inlier ratio")

    summary = [f"evaluate: {sum(len(v) for v in rows.values())} results, {len(rows)} methods"]
    if a.clusters or a.classes:
        if len(a.clusters or ()) != len(a.classes or ()):
            raise UsageError("--clusters and --classes need the same number of label maps")
        xs, ys, n_clusters, n_classes = [], [], None, None
        for cf, yf in zip(a.clusters, a.classes):
            x, y = model.load_artifact(cf, "label"), model.load_artifact(yf, "label")
            if x.labels.shape != y.labels.shape:
                raise DataError(f"{cf} and {yf} differ in size")
            xs.append(x.labels.reshape(-1))
            ys.append(y.labels.reshape(-1))
            n_clusters = max(n_clusters or 0, x.num_classes)
            n_classes = max(n_classes or 0, y.num_classes)
        pair = evaluation.AssignmentPair(np.concatenate(xs), np.concatenate(ys))
        ctab = evaluation.contingency(pair, n_classes, n_clusters)
        score = evaluation.nmi(pair)
        _write(out / "nmi.txt", f"{score!r}\n")
        _write(out / "contingency.csv", "\n".join(",".join(str(int(c)) for c in row) for row in ctab) + "\n")
        plotting.plot_contingency(ctab, out / "contingency.png", "classes vs clusters")
        summary.append(f"NMI {score:.4f}, contingency {n_classes}x{n_clusters}")
    sys.stdout.write(table)
    return ", ".join(summary) + f" -> {out}"


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fgsn", description="Fine-grained segmentation and semantic localization toolkit.")
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seeded=True):
        sp.add_argument("--config", help="RunConfig container supplying option defaults")
        sp.add_argument("--threads", type=_positive_int, default=1, help="worker cap for compiled kernels")
        if seeded:
            sp.add_argument("--seed", type=int, required=True)

    s = sub.add_parser("simulate", help="generate a synthetic benchmark")
    common(s)
    s.add_argument("--out", required=True, help="existing output directory")
    s.add_argument("--points", type=_positive_int, default=20000)
    s.add_argument("--k-fine", type=_positive_int, default=100)
    s.add_argument("--k-coarse", type=_positive_int, default=10)
    s.add_argument("--label-concentration", type=float, default=simulation.SceneSpec.label_concentration)
    s.add_argument("--length", type=float, default=20.0, help="trajectory length in metres")
    s.add_argument("--step", type=float, default=1.0, help="metres between queries")
    s.add_argument("--curvature", type=float, default=0.5)
    s.add_argument("--pixel-noise", type=float, default=simulation.NoiseSpec.pixel_noise_px)
    s.add_argument("--outlier-rate", type=float, default=simulation.NoiseSpec.outlier_rate)
    s.add_argument("--mislabel-base", type=float, default=simulation.NoiseSpec.mislabel_base)
    s.add_argument("--mislabel-slope", type=float, default=simulation.NoiseSpec.mislabel_slope)
    s.add_argument("--jitter", type=int, default=simulation.NoiseSpec.boundary_jitter_px)
    s.add_argument("--max-features", type=_positive_int, default=simulation.NoiseSpec.max_features)
    s.add_argument("--train-pairs", type=_positive_int, default=6)
    s.add_argument("--feature-dim", type=_positive_int, default=8)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("cluster", help="k-means labels for feature maps")
    common(c)
    c.add_argument("--data", required=True, help="directory with *.fmap and correspondences.json")
    c.add_argument("--out", required=True)
    c.add_argument("--k", type=_positive_int, default=20)
    c.add_argument("--samples", type=_positive_int, default=2000)
    c.add_argument("--pca-dim", type=_positive_int, default=8)
    c.add_argument("--restarts", type=_positive_int, default=1)
    c.add_argument("--max-iters", type=_positive_int, default=100)
    c.set_defaults(func=cmd_cluster)

    t = sub.add_parser("train", help="train the toy segmentation head")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--k", type=_positive_int, default=20)
    t.add_argument("--iterations", type=_positive_int, default=200)
    t.add_argument("--recluster-interval", type=_positive_int, default=50)
    t.add_argument("--learning-rate", type=float, default=0.05)
    t.add_argument("--hidden", type=_positive_int, default=16)
    t.add_argument("--pca-dim", type=_positive_int, default=8)
    t.add_argument("--no-recluster-reset", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="patch-blended prediction")
    common(i, seeded=False)
    i.add_argument("--head", required=True)
    i.add_argument("--features", required=True)
    i.add_argument("--out", required=True, help="score map path; labels go next to it as .lmap")
    i.add_argument("--patch", type=_positive_int, default=inference.TileSpec.patch_size)
    i.add_argument("--stride", type=_positive_int, default=inference.TileSpec.stride)
    i.add_argument("--core", type=_positive_int, default=inference.TileSpec.core_size)
    i.set_defaults(func=cmd_infer)

    lo = sub.add_parser("localize", help="estimate query poses")
    common(lo)
    lo.add_argument("--scene", required=True)
    lo.add_argument("--queries", required=True)
    lo.add_argument("--out", required=True, help="results CSV")
    lo.add_argument("--method", required=True, choices=LOCALIZE_METHODS)
    lo.add_argument("--camera", help="defaults to camera.json next to the scene")
    lo.add_argument("--trajectory", help="pfsl only; defaults to trajectory.json next to the query directory")
    lo.add_argument("--iterations", type=_positive_int, default=10000)
    lo.add_argument("--threshold", type=float, default=5.0, help="inlier threshold in pixels")
    lo.add_argument("--ratio", type=float, default=0.9)
    lo.add_argument("--yaw-samples", type=_positive_int, default=360)
    lo.add_argument("--score-points", type=int, default=simulation.BenchmarkConfig.gsmc_score_points)
    lo.add_argument("--ground-z", type=float, default=0.0)
    lo.add_argument("--particles", type=_positive_int, default=1000)
    lo.add_argument("--sharpness", type=float, default=10.0)
    lo.add_argument("--odometry-std-xy", type=float, default=simulation.NoiseSpec.odometry_std_xy)
    lo.add_argument("--odometry-std-theta", type=float, default=simulation.NoiseSpec.odometry_std_theta)
    lo.set_defaults(func=cmd_localize)

    e = sub.add_parser("evaluate", help="recall table, CDFs, NMI and contingency")
    common(e, seeded=False)
    e.add_argument("--results", required=True, nargs="+")
    e.add_argument("--out", required=True)
    e.add_argument("--clusters", nargs="*", help="cluster label maps (.lmap)")
    e.add_argument("--classes", nargs="*", help="class label maps paired with --clusters")
    e.set_defaults(func=cmd_evaluate)
    return p


def _config_path(argv) -> str | None:
    for n, tok in enumerate(argv):
        if tok == "--config" and n + 1 < len(argv):
            return argv[n + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv`` after replacing option defaults with the ``--config`` file."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    choices = parser._subparsers._group_actions[0].choices  # noqa: SLF001
    command = next((tok for tok in argv if tok in choices), None)
    if path and command:
        cfg = model.load_artifact(path)
        if not isinstance(cfg, model.RunConfig):
            raise DataError(f"{path} does not hold a RunConfig")
        sub = choices[command]
        known = {a.dest: a for a in sub._actions}  # noqa: SLF001
        for key in cfg:
            dest = key.replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                raise UsageError(f"config key {key!r} is not an option of {command}")
            # supplied by the file, so no longer required on the command line
            known[dest].required = False
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def _cap_threads(n: int) -> None:
    import numba

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # numba warns about an old TBB it will not use
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        _cap_threads(args.threads)
        print(args.func(args))
        return EXIT_OK
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"fgsn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, model.ArtifactParseError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"fgsn: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"fgsn: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
