import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldarecon import fidelity as fd
from ldarecon import numerics
from ldarecon.errors import InvalidArgument, InvalidConfiguration, InvalidData
from ldarecon.harness import cli, data, experiment, metrics
from ldarecon.solver import IterateTrace


# ---------------------------------------------------------------- metrics


def test_psnr_examples():
    x = np.zeros((10, 10))
    assert metrics.psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-12)
    assert metrics.psnr(x, x) == metrics.PSNR_CAP
    assert metrics.psnr(x + 0.2, x, peak=2.0) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(InvalidArgument):
        metrics.psnr(x, x, peak=0.0)
    with pytest.raises(InvalidArgument):
        metrics.psnr(x, x[:5])


def test_rel_err_examples():
    x_hat = np.ones((4, 4))
    assert metrics.rel_err(1.5 * x_hat, x_hat) == pytest.approx(0.5)
    assert metrics.rel_err(x_hat, 2 * x_hat) == pytest.approx(0.5)
    assert metrics.rel_err(2 * x_hat, x_hat) == pytest.approx(1.0)
    with pytest.raises(InvalidArgument):
        metrics.rel_err(x_hat, 0 * x_hat)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metric_symmetries(seed):
    rng = numerics.make_rng(seed)
    a, b = rng.random((12, 12)), rng.random((12, 12))
    assert metrics.psnr(a, b) == metrics.psnr(b, a)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-15)
    assert metrics.ssim(a, b) <= 1.0
    assert metrics.rel_err(a, b) >= 0


def test_ssim_identity_and_inverted_checkerboard():
    img = numerics.make_rng(0).random((16, 16))
    assert metrics.ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    board = (np.indices((32, 32)).sum(axis=0) // 4 % 2).astype(float)
    assert metrics.ssim(1.0 - board, board) < 0.5
    with pytest.raises(InvalidArgument):
        metrics.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_matches_reference_implementation():
    structural_similarity = pytest.importorskip("skimage.metrics").structural_similarity
    rng = numerics.make_rng(1)
    for _ in range(5):
        a = rng.random((33, 33))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0)
        assert metrics.ssim(a, b) == pytest.approx(ref, abs=1e-10)


# ---------------------------------------------------------------- data


def test_synthetic_images_range_and_determinism():
    a = data.synthetic_images(6, (16, 16), numerics.make_rng(3))
    b = data.synthetic_images(6, (16, 16), numerics.make_rng(3))
    assert np.array_equal(a, b)
    assert a.shape == (6, 16, 16)
    assert a.min() >= 0.0 and a.max() <= 1.0
    with pytest.raises(InvalidData):
        data.synthetic_images(1, (4, 4), numerics.make_rng(0), kind="noise")


@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_roundtrip(tmp_path, maxval):
    img = numerics.make_rng(2).random((7, 9))
    path = tmp_path / "a.pgm"
    data.write_pgm(path, img, maxval=maxval)
    back = data.read_pgm(path)
    assert back.shape == (7, 9)
    assert np.max(np.abs(back - img)) <= 0.5 / maxval + 1e-15
    data.write_pgm(path, back, maxval=maxval)
    assert np.array_equal(data.read_pgm(path), back)


def test_pgm_header_comments_and_errors(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(data.read_pgm(path), [[0.0, 1.0]])
    (tmp_path / "bad.pgm").write_bytes(b"P2\n2 1\n255\n0 255")
    with pytest.raises(InvalidData):
        data.read_pgm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(InvalidData):
        data.read_pgm(tmp_path / "short.pgm")
    with pytest.raises(data.DataIOError):
        data.read_pgm(tmp_path / "missing.pgm")


def test_load_glob_center_crops(tmp_path):
    img = np.arange(36, dtype=float).reshape(6, 6) / 35
    data.write_pgm(tmp_path / "x.pgm", img, maxval=65535)
    out = data.load_glob(tmp_path / "*.pgm", (2, 2))
    assert out.shape == (1, 2, 2)
    np.testing.assert_allclose(out[0], img[2:4, 2:4], atol=1e-5)
    with pytest.raises(InvalidData):
        data.load_glob(tmp_path / "*.pgm", (7, 7))
    with pytest.raises(data.DataIOError):
        data.load_glob(tmp_path / "*.none")


# ---------------------------------------------------------------- block CS init


def test_init_block_cs_identity():
    op = fd.DenseOperator(np.eye(9), (3, 3))
    x_train = numerics.make_rng(0).random((20, 3, 3))
    np.testing.assert_allclose(experiment.init_block_cs(op, x_train), np.eye(9), atol=1e-10)


def test_init_block_cs_normal_equations_and_optimality():
    rng = numerics.make_rng(4)
    op = fd.DenseOperator.orthonormal_gaussian(0.25, (8, 8), rng)
    x_train = data.synthetic_images(10, (8, 8), rng)
    Q = experiment.init_block_cs(op, x_train)
    X = x_train.reshape(10, -1).T
    B = op.matrix @ X
    # rank-deficient with 10 samples and 16 rows, so the ridge is active
    gram = B @ B.T
    if np.linalg.cond(gram) > 1e12:
        gram = gram + 1e-8 * np.eye(gram.shape[0])
    oracle = np.linalg.solve(gram, B @ X.T).T
    np.testing.assert_allclose(Q, oracle, atol=1e-8)

    x_train = data.synthetic_images(60, (8, 8), rng)
    Q = experiment.init_block_cs(op, x_train)
    X = x_train.reshape(60, -1).T
    B = op.matrix @ X
    base = np.linalg.norm(Q @ B - X)
    for _ in range(20):
        P = Q + 1e-3 * rng.standard_normal(Q.shape)
        assert base <= np.linalg.norm(P @ B - X)


# ---------------------------------------------------------------- experiments


def test_config_validation_and_roundtrip(tmp_path):
    with pytest.raises(InvalidConfiguration):
        experiment.ExperimentConfig(task="deblur")
    with pytest.raises(InvalidConfiguration):
        experiment.ExperimentConfig(task="mri", cs_ratio=1.0)
    with pytest.raises(InvalidConfiguration):
        experiment.ExperimentConfig(solver={"gamma": 2.0})
    with pytest.raises(InvalidConfiguration):
        experiment.ExperimentConfig.from_dict({"schema": 2})
    with pytest.raises(InvalidConfiguration):
        experiment.ExperimentConfig.from_dict({"colour": True})
    cfg = experiment.ExperimentConfig(task="mri", cs_ratio=0.3, seed=5)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert experiment.ExperimentConfig.from_json(path) == cfg
    path.write_text("{")
    with pytest.raises(InvalidConfiguration):
        experiment.ExperimentConfig.from_json(path)


def test_constant_image_denoise_is_fixed(tmp_path):
    pgm = tmp_path / "img"
    data.write_pgm(pgm / "flat.pgm", np.full((12, 12), 0.4))
    cfg = experiment.ExperimentConfig(task="denoise", image_source=str(pgm / "*.pgm"),
                                      image_shape=(12, 12), n_images=1,
                                      feature_map={"variant": "linear_diff", "weight": 0.1},
                                      output_dir=str(tmp_path / "out"))
    images, *_ = experiment.build_problem(cfg)
    experiment.run_experiment(cfg)
    recon = data.read_pgm(tmp_path / "out" / "recon_000.pgm")
    np.testing.assert_allclose(recon, images[0], atol=1e-6)
    trace = IterateTrace.from_csv(tmp_path / "out" / "trace_000.csv")
    # eps0 falls back to 1 and the zero gradient triggers a reduction every
    # step until sigma * eps drops below 1e-3
    assert list(trace.column("reduced")) == [True] * 10
    assert not np.any(trace.column("grad_norm"))


def test_mri_starts_from_zero(tmp_path):
    cfg = experiment.ExperimentConfig(task="mri", cs_ratio=0.3, image_shape=(12, 12), n_images=1,
                                      solver={"max_iters": 5}, output_dir=str(tmp_path))
    images, op, b, x0, info = experiment.build_problem(cfg)
    assert not np.any(x0)
    manifest = experiment.run_experiment(cfg)
    trace = IterateTrace.from_csv(tmp_path / "trace_000.csv")
    f0 = 0.5 * np.sum(np.abs(b[0]) ** 2)
    assert trace.rows[0].phi_eps == pytest.approx(f0, rel=1e-12)  # g(0) = 0 for TV
    assert manifest["achieved_mask_ratio"] >= 0.3
    assert (tmp_path / "mask.pgm").exists()
    for key in ("L_f", "L_g", "M", "m", "L_eps"):
        assert key in manifest["constants"]


def test_block_cs_improves_on_linear_init(tmp_path):
    cfg = experiment.ExperimentConfig(task="block_cs", cs_ratio=0.25, n_images=4,
                                      solver={"max_iters": 5000}, output_dir=str(tmp_path))
    experiment.run_experiment(cfg)
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0] == "image,psnr,rel_err,ssim,psnr_x0,iterations,final_eps"
    gains = [float(r.split(",")[1]) - float(r.split(",")[4]) for r in rows[1:]]
    assert np.mean(gains) >= 1.0


def test_feature_norm_map_is_invertible(tmp_path):
    cfg = experiment.ExperimentConfig(task="denoise", noise_sigma=0.1, image_shape=(12, 12),
                                      n_images=1, solver={"max_iters": 20},
                                      output_dir=str(tmp_path))
    manifest = experiment.run_experiment(cfg)
    lo, hi = manifest["feature_norm_ranges"][0]["min"], manifest["feature_norm_ranges"][0]["max"]
    scaled = data.read_pgm(tmp_path / "feature_norm_000.pgm")
    assert scaled.min() == 0.0 and scaled.max() == 1.0
    assert hi > lo >= 0.0


def test_manifest_rerun_is_bitwise(tmp_path):
    cfg = experiment.ExperimentConfig(task="mri", cs_ratio=0.3, image_shape=(16, 16), n_images=2,
                                      noise_sigma=0.01, solver={"max_iters": 50}, workers=2,
                                      output_dir=str(tmp_path / "a"))
    experiment.run_experiment(cfg)
    again = experiment.ExperimentConfig.from_json(tmp_path / "a" / "manifest.json")
    again.output_dir = str(tmp_path / "b")
    experiment.run_experiment(again)
    for name in ("metrics.csv", "trace_000.csv", "trace_001.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# ---------------------------------------------------------------- cli


def test_cli_solve_and_inspect(tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main(["solve", "--task", "denoise", "--image-shape", "12", "12", "--n-images", "1",
                   "--noise-sigma", "0.1", "--max-iters", "30", "--output", str(out)])
    assert rc == 0
    assert (out / "manifest.json").exists()
    rc = cli.main(["inspect-trace", str(out / "trace_000.csv"), "--m", "144"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "iterations" in text and "max increase" in text


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["solve", "--config", str(tmp_path / "missing.json")]) == 4
    (tmp_path / "bad.json").write_text(json.dumps({"task": "denoise", "solver": {"gamma": 3}}))
    assert cli.main(["solve", "--config", str(tmp_path / "bad.json")]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["solve", "--task", "deblur"])
    assert info.value.code == 2
    assert cli.main(["inspect-trace", str(tmp_path / "none.csv")]) == 4


def test_cli_make_data_and_train(tmp_path, capsys):
    assert cli.main(["make-data", "--count", "3", "--image-shape", "8", "8",
                     "--output", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d").glob("*.pgm"))) == 3
    rc = cli.main(["train", "--image-source", str(tmp_path / "d" / "*.pgm"), "--image-shape", "8", "8",
                   "--k-start", "1", "--k-end", "3", "--steps", "2", "--depth", "4",
                   "--output", str(tmp_path / "t")])
    assert rc == 0
    assert (tmp_path / "t" / "loss.csv").read_text().startswith("step,mean_loss")
    assert (tmp_path / "t" / "params.bin").exists()
