"""Command-line surface: subcommands, exit codes, manifests, reports."""

import json

import numpy as np
import pytest
from conftest import synthetic_model

from fepll.cli import build_parser, main, restore_args_from_manifest
from fepll.manifest import read_manifest, sha256_file
from fepll.model_io import model_read, model_write, write_covariance_text
from fepll.pgm import image_read, image_write
from fepll.phantoms import phantom_image
from fepll.tree import tree_read


@pytest.fixture()
def workspace(tmp_path):
    """A tiny model, a clean image and its noisy version, on disk."""
    model = synthetic_model(4, 64, seed=0)
    model_path = tmp_path / "model.gmm"
    model_write(model, model_path)
    clean = phantom_image(48, 48, 5)
    rng = np.random.default_rng(1)
    noisy = np.clip(clean + (20 / 255.0) * rng.standard_normal(clean.shape), 0, 1)
    clean_path = tmp_path / "clean.pgm"
    noisy_path = tmp_path / "noisy.pgm"
    image_write(clean, clean_path)
    image_write(noisy, noisy_path)
    return {"dir": tmp_path, "model": model_path, "clean": clean_path,
            "noisy": noisy_path}


def test_default_flags_match_standard_settings():
    parser = build_parser()
    args = parser.parse_args(["restore", "denoise", "--input", "i",
                              "--output", "o", "--model", "m"])
    assert args.iters == 5
    assert args.spacing == 6
    assert args.rho == 0.95
    assert args.beta_multipliers == "1,4,8,16,32"
    assert args.sigma == 20.0


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["restore", "not-a-task", "--input", "i", "--output", "o",
              "--model", "m"])
    assert exc.value.code == 2


def test_missing_input_is_data_error(workspace, capsys):
    code = main(["restore", "denoise", "--input", str(workspace["dir"] / "no.pgm"),
                 "--output", str(workspace["dir"] / "out.pgm"),
                 "--model", str(workspace["model"])])
    assert code == 3
    assert "error" in capsys.readouterr().err


def test_denoise_writes_output_metrics_and_manifest(workspace, capsys):
    out = workspace["dir"] / "out.pgm"
    code = main(["restore", "denoise",
                 "--input", str(workspace["noisy"]),
                 "--output", str(out),
                 "--model", str(workspace["model"]),
                 "--reference", str(workspace["clean"]),
                 "--seed", "3"])
    assert code == 0
    printed = capsys.readouterr().out
    assert "PSNR" in printed and "SSIM" in printed
    assert out.exists()
    manifest = read_manifest(f"{out}.manifest.json")
    assert manifest["outputs"]["image"]["sha256"] == sha256_file(out)
    assert manifest["parameters"]["spacing"] == 6
    assert manifest["metrics"]["psnr"] > 20.0


def test_manifest_rerun_reproduces_digest(workspace):
    out1 = workspace["dir"] / "a.pgm"
    assert main(["restore", "denoise", "--input", str(workspace["noisy"]),
                 "--output", str(out1), "--model", str(workspace["model"]),
                 "--seed", "7"]) == 0
    manifest = read_manifest(f"{out1}.manifest.json")
    out2 = workspace["dir"] / "b.pgm"
    assert main(restore_args_from_manifest(manifest, str(out2))) == 0
    assert sha256_file(out1) == sha256_file(out2)


def test_exact_flag_rejects_nothing_and_runs(workspace):
    out = workspace["dir"] / "exact.pgm"
    code = main(["restore", "denoise", "--input", str(workspace["noisy"]),
                 "--output", str(out), "--model", str(workspace["model"]),
                 "--exact"])
    assert code == 0
    manifest = read_manifest(f"{out}.manifest.json")
    assert manifest["parameters"]["spacing"] == 1
    assert manifest["parameters"]["use_tree"] is False


def test_deblur_requires_kernel(workspace, capsys):
    code = main(["restore", "deblur", "--input", str(workspace["noisy"]),
                 "--output", str(workspace["dir"] / "o.pgm"),
                 "--model", str(workspace["model"])])
    assert code == 3
    assert "kernel" in capsys.readouterr().err


def test_deblur_with_kernel(workspace):
    kpath = workspace["dir"] / "k.txt"
    kpath.write_text("3 3\n" + "\n".join(["0.1 0.1 0.1"] * 3).replace(
        "0.1 0.1 0.1", " ".join(["0.1111111111111111"] * 3)) + "\n")
    out = workspace["dir"] / "deblur.pgm"
    code = main(["restore", "deblur", "--input", str(workspace["noisy"]),
                 "--output", str(out), "--model", str(workspace["model"]),
                 "--kernel", str(kpath), "--sigma", "2"])
    assert code == 0 and out.exists()


def test_inpaint_and_devignette(workspace):
    rng = np.random.default_rng(2)
    mask = (rng.random((48, 48)) > 0.5).astype(float)
    mask_path = workspace["dir"] / "mask.pgm"
    image_write(mask, mask_path)
    clean = image_read(workspace["clean"])
    observed = clean * mask
    obs_path = workspace["dir"] / "obs.pgm"
    image_write(observed, obs_path)
    out = workspace["dir"] / "inpainted.pgm"
    code = main(["restore", "inpaint", "--input", str(obs_path),
                 "--output", str(out), "--model", str(workspace["model"]),
                 "--mask", str(mask_path), "--sigma", "2"])
    assert code == 0 and out.exists()

    out2 = workspace["dir"] / "devig.pgm"
    code = main(["restore", "devignette", "--input", str(workspace["noisy"]),
                 "--output", str(out2), "--model", str(workspace["model"]),
                 "--sigma", "2"])
    assert code == 0 and out2.exists()


def test_sr_output_dims(workspace):
    low = phantom_image(16, 16, 9)
    low_path = workspace["dir"] / "low.pgm"
    image_write(low, low_path)
    out = workspace["dir"] / "high.pgm"
    code = main(["restore", "sr", "--input", str(low_path),
                 "--output", str(out), "--model", str(workspace["model"]),
                 "--factor", "3", "--sigma", "2", "--spacing", "4"])
    assert code == 0
    assert image_read(out).shape == (48, 48)


def test_train_flatten_build_tree_inspect(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    for i in range(3):
        image_write(phantom_image(64, 64, 50 + i), corpus / f"img{i}.pgm")
    model_path = tmp_path / "trained.gmm"
    code = main(["train", "--corpus", str(corpus), "--components", "3",
                 "--iters", "4", "--samples", "3000", "--seed", "0",
                 "--out", str(model_path)])
    assert code == 0
    assert "log-likelihood" in capsys.readouterr().out
    model = model_read(model_path)
    assert model.n_components == 3 and model.patch_dim == 64

    flat_path = tmp_path / "flat.gmm"
    assert main(["flatten", str(model_path), "--rho", "0.9",
                 "--out", str(flat_path)]) == 0
    printed = capsys.readouterr().out
    assert "mean rank" in printed
    assert model_read(flat_path).rho == 0.9

    tree_path = tmp_path / "t.tree"
    assert main(["build-tree", str(flat_path), "--out", str(tree_path)]) == 0
    tree = tree_read(tree_path)
    assert tree.n_leaves == 3

    assert main(["inspect", str(flat_path)]) == 0
    assert "components" in capsys.readouterr().out
    assert main(["inspect", str(tree_path)]) == 0
    assert "leaves" in capsys.readouterr().out


def test_train_rejects_too_many_components(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    image_write(phantom_image(16, 16, 1), corpus / "img.pgm")
    code = main(["train", "--corpus", str(corpus), "--components", "50",
                 "--samples", "10", "--iters", "2", "--out",
                 str(tmp_path / "m.gmm")])
    assert code == 3


def test_import_model_roundtrip(tmp_path):
    model = synthetic_model(2, 16, seed=3)
    text_path = tmp_path / "dump.txt"
    write_covariance_text(model, text_path)
    out = tmp_path / "imported.gmm"
    assert main(["import-model", "--text", str(text_path),
                 "--out", str(out)]) == 0
    back = model_read(out)
    assert back.n_components == 2 and back.patch_dim == 16


def test_benchmark_synthetic(tmp_path, capsys):
    model_path = tmp_path / "model.gmm"
    model_write(synthetic_model(4, 64, seed=4), model_path)
    outdir = tmp_path / "bench"
    code = main(["benchmark", "--synthetic", "2", "--size", "48",
                 "--model", str(model_path), "--profiles", "full,exact",
                 "--sigma", "20", "--out", str(outdir)])
    assert code == 0
    csv_text = (outdir / "benchmark.csv").read_text().strip().splitlines()
    assert len(csv_text) == 1 + 4  # header + 2 images x 2 profiles
    md = (outdir / "benchmark.md").read_text()
    assert "| profile |" in md and "exact" in md
    assert (outdir / "speedup.png").exists()
    assert (outdir / "quality.png").exists()


def test_benchmark_empty_corpus_rejected(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    model_path = tmp_path / "model.gmm"
    model_write(synthetic_model(2, 64, seed=5), model_path)
    code = main(["benchmark", "--corpus", str(empty), "--model",
                 str(model_path), "--out", str(tmp_path / "bench")])
    assert code == 3
