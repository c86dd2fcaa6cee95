import numpy as np
import pytest

from finepart import mergenet as M
from finepart.cli import main
from finepart.config import ConfigError, PipelineConfig, dump_config, load_config

TINY = ["--families", "ladder", "--shapes-per-family", "5", "--points-total", "1500",
        "--prior-epochs", "1", "--per-count", "4", "--merge-epochs", "2"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    common = ["--out", str(root / "run"), "--data-root", str(root / "data"), *TINY]
    assert main(["gen-data", *common]) == 0
    assert main(["train-prior", *common]) == 0
    assert main(["train-merge", *common]) == 0
    return root, common


def test_pipeline_artifacts(run, capsys):
    root, common = run
    assert (root / "data/manifest.tsv").exists()
    assert (root / "run/prior.ckpt").exists() and (root / "run/prior_log.tsv").exists()
    assert (root / "run/merge/ladder.ckpt").exists()
    assert main(["segment", *common]) == 0
    parts = sorted((root / "run/parts").glob("*.parts"))
    assert len(parts) == 1
    assert main(["eval", *common]) == 0
    assert "average IoU" in capsys.readouterr().out
    assert (root / "run/report.tsv").read_text().splitlines()[-1].startswith("#summary")
    assert (root / "run/graphs").is_dir()


def test_segment_single_file_is_deterministic(run, tmp_path):
    root, common = run
    shape = sorted((root / "data/shapes").glob("*.xyz"))[0]
    outs = []
    for k in range(2):
        out = tmp_path / f"p{k}.parts"
        assert main(["segment", str(shape), "--family", "ladder", "--output", str(out), *common]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    parts = M.read_parts(tmp_path / "p0.parts")
    assert len(parts) == 1500


def test_training_commands_are_reproducible(run, tmp_path):
    root, common = run
    other = ["--out", str(tmp_path / "again"), "--data-root", str(root / "data"), *TINY]
    assert main(["train-prior", *other]) == 0
    assert (tmp_path / "again/prior.ckpt").read_bytes() == (root / "run/prior.ckpt").read_bytes()
    assert main(["train-merge", *other]) == 0
    assert (tmp_path / "again/merge/ladder.ckpt").read_bytes() == (root / "run/merge/ladder.ckpt").read_bytes()


def test_merge_training_leaves_prior_untouched(run):
    root, common = run
    before = (root / "run/prior.ckpt").read_bytes()
    assert main(["train-merge", *common]) == 0
    assert (root / "run/prior.ckpt").read_bytes() == before


def test_eval_perfect_prediction(tmp_path, capsys):
    (tmp_path / "gt.xyz").write_text("0 0 0 0\n1 0 0 0\n0 1 0 1\n")
    M.write_parts(tmp_path / "p.parts", np.array([4, 4, 2]))
    assert main(["eval", "--pred", str(tmp_path / "p.parts"), "--gt", str(tmp_path / "gt.xyz")]) == 0
    assert "average IoU 1.0000" in capsys.readouterr().out


def test_stats_and_export(run, tmp_path, capsys):
    root, common = run
    assert main(["stats", *common]) == 0
    out = capsys.readouterr().out
    assert "#fraction_le_5" in out
    shape = sorted((root / "data/shapes").glob("*.xyz"))[0]
    assert main(["export-ply", str(shape), str(tmp_path / "s.ply")]) == 0
    assert (tmp_path / "s.ply").read_text().startswith("ply")


def test_sweep_marks_missing_settings(run, tmp_path):
    root, common = run
    table = tmp_path / "sweep.tsv"
    args = ["sweep", "--resolutions", "5,7", "--layer-values", "0,3", "--table", str(table), *common]
    assert main(args) == 0
    rows = table.read_text().splitlines()
    assert len(rows) == 1 + 4
    assert all("\tabsent\t" in r for r in rows[1:])
    first = table.read_text()
    assert main(args) == 0
    assert table.read_text() == first


def test_errors_are_one_line(tmp_path, capsys):
    code = main(["train-merge", "--out", str(tmp_path / "nothing"), "--data-root", str(tmp_path / "nodata")])
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0 and len(err) == 1 and err[0].startswith("error\t")
    (tmp_path / "bad.ini").write_text("[prior]\nepochz = 3\n")
    assert main(["stats", "--config", str(tmp_path / "bad.ini")]) != 0
    assert "unknown config key prior.epochz" in capsys.readouterr().err


def test_config_roundtrip_and_validation(tmp_path):
    cfg = PipelineConfig().with_overrides(layers=2, families=("ladder", "wheel"), epsilon=0.01)
    (tmp_path / "c.ini").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.ini") == cfg
    defaults = PipelineConfig()
    assert (defaults.resolution, defaults.block_size, defaults.margin, defaults.r_max) == (7, 512, 100.0, 5)
    assert (defaults.r_max_merge, defaults.layers, defaults.prior_batch_size, defaults.merge_batch_size) == (100, 3, 24, 4)
    with pytest.raises(ConfigError):
        PipelineConfig(layers=-1)
    with pytest.raises(ConfigError):
        defaults.with_overrides(bogus=1)
    (tmp_path / "s.ini").write_text("[nowhere]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "s.ini")
