import os

import numpy as np
import pytest

from rcdet import config
from rcdet.cli import main
from rcdet.config import ConfigError
from rcdet.rc import COMPLETE_MATRIX

BASE = """\
scene:
  seed: 7
  density: 2
  train_count: 8
  test_count: 4
connection:
  form: economical
  n: 4.0
training:
  epochs: 1
  lr: 0.005
  seeds: [0]
outputs: {out}
"""


def write_cfg(tmp_path, text=None, **kw):
    out = tmp_path / "exp"
    body = (text or BASE).format(out=out)
    path = tmp_path / "exp.yaml"
    path.write_text(body)
    return str(path), str(out)


class TestConfigSchema:
    def test_round_trip_is_identity(self, tmp_path):
        path, _ = write_cfg(tmp_path)
        cfg = config.load(path)
        text1 = config.save_text(cfg)
        cfg2 = config.load_text(text1)
        assert config.save_text(cfg2) == text1
        assert cfg == cfg2

    def test_save_load_file(self, tmp_path):
        path, _ = write_cfg(tmp_path)
        cfg = config.load(path)
        config.save(cfg, tmp_path / "copy.yaml")
        assert config.load(tmp_path / "copy.yaml") == cfg

    def test_unknown_key_rejected_with_line(self, tmp_path):
        path, _ = write_cfg(tmp_path)
        text = open(path).read() + "surprise: 1\n"
        with pytest.raises(ConfigError, match=r"line 14.*surprise"):
            config.load_text(text)

    def test_unknown_nested_key_rejected(self):
        text = BASE.format(out="/tmp/x").replace("  density: 2",
                                                 "  density: 2\n  flavor: mild")
        with pytest.raises(ConfigError, match="flavor"):
            config.load_text(text)

    def test_seed_required(self):
        text = BASE.format(out="/tmp/x").replace("  seed: 7\n", "")
        with pytest.raises(ConfigError, match="seed is required"):
            config.load_text(text)

    def test_strength_required_for_economical(self):
        text = BASE.format(out="/tmp/x").replace("  n: 4.0\n", "")
        with pytest.raises(ConfigError, match="n is required"):
            config.load_text(text)

    def test_complete_matrix_defaults_to_published_constant(self):
        text = BASE.format(out="/tmp/x").replace(
            "connection:\n  form: economical\n  n: 4.0",
            "detector:\n  num_levels: 4\nconnection:\n  form: complete")
        cfg = config.load_text(text)
        assert np.array_equal(cfg.connection.matrix, COMPLETE_MATRIX)

    def test_matrix_needs_16_values(self):
        text = BASE.format(out="/tmp/x").replace(
            "connection:\n  form: economical\n  n: 4.0",
            "detector:\n  num_levels: 4\nconnection:\n  form: complete\n"
            "  matrix: [1, 0, 0]")
        with pytest.raises(ConfigError, match="16"):
            config.load_text(text)

    def test_complete_needs_four_levels(self):
        text = BASE.format(out="/tmp/x").replace(
            "connection:\n  form: economical\n  n: 4.0",
            "connection:\n  form: complete")
        with pytest.raises(ConfigError, match="num_levels"):
            config.load_text(text)

    def test_type_errors_are_line_anchored(self):
        text = BASE.format(out="/tmp/x").replace("epochs: 1", "epochs: soon")
        with pytest.raises(ConfigError, match="line 10"):
            config.load_text(text)

    def test_bool_is_not_an_int(self):
        text = BASE.format(out="/tmp/x").replace("seeds: [0]", "seeds: [true]")
        with pytest.raises(ConfigError, match="seeds"):
            config.load_text(text)

    def test_no_connection_section_means_baseline(self):
        text = BASE.format(out="/tmp/x").replace(
            "connection:\n  form: economical\n  n: 4.0\n", "")
        assert config.load_text(text).connection is None

    def test_yaml_syntax_error_reports_line(self):
        with pytest.raises(ConfigError, match="line"):
            config.load_text("scene:\n  seed: [unclosed\n")

    def test_addons_round_trip(self):
        text = BASE.format(out="/tmp/x").replace(
            "  n: 4.0", "  n: 4.0\n  addons: [projection_1x1, activation]")
        cfg = config.load_text(text)
        assert cfg.connection.addons.projection_1x1
        assert not cfg.connection.addons.norm
        assert config.load_text(config.save_text(cfg)) == cfg

    def test_unknown_addon_rejected(self):
        text = BASE.format(out="/tmp/x").replace(
            "  n: 4.0", "  n: 4.0\n  addons: [senf]")
        with pytest.raises(ConfigError, match="senf"):
            config.load_text(text)

    def test_hash_tracks_content(self, tmp_path):
        path, _ = write_cfg(tmp_path)
        cfg = config.load(path)
        other = config.load_text(open(path).read().replace("n: 4.0", "n: 5.0"))
        assert cfg.config_hash() != other.config_hash()
        assert cfg.config_hash() == config.load(path).config_hash()


class TestCli:
    def test_generate_writes_dataset(self, tmp_path, capsys):
        path, out = write_cfg(tmp_path)
        assert main(["generate", "--config", path]) == 0
        assert os.path.exists(os.path.join(out, "dataset", "meta.txt"))
        assert os.path.exists(os.path.join(out, "dataset", "train", "img_0007.tsr"))
        assert "8 train / 4 test" in capsys.readouterr().out

    def test_train_eval_analyze_chain(self, tmp_path, capsys):
        path, out = write_cfg(tmp_path)
        assert main(["train", "--config", path]) == 0
        run = os.path.join(out, "run_seed0")
        assert os.path.exists(os.path.join(run, "trajectory.csv"))
        assert os.path.exists(os.path.join(run, "trajectory.png"))
        assert os.path.exists(os.path.join(run, "checkpoint", "manifest.txt"))

        assert main(["eval", "--config", path]) == 0
        assert os.path.exists(os.path.join(out, "eval", "ap.csv"))
        assert "ap50" in capsys.readouterr().out

        assert main(["analyze", "--config", path, "--images", "1"]) == 0
        ana = os.path.join(out, "analysis")
        assert os.path.exists(os.path.join(ana, "saliency_000_p3.pgm"))
        assert os.path.exists(os.path.join(ana, "saliency_000.png"))
        assert os.path.exists(os.path.join(ana, "interference.csv"))
        assert "parameter: stem.weight" in open(
            os.path.join(ana, "grad_check.txt")).read()

    def test_zero_epoch_train_writes_checkpoint(self, tmp_path, capsys):
        text = BASE.replace("epochs: 1", "epochs: 0")
        path, out = write_cfg(tmp_path, text=text)
        assert main(["train", "--config", path]) == 0
        assert os.path.exists(os.path.join(out, "run_seed0", "checkpoint",
                                           "manifest.txt"))
        csv = open(os.path.join(out, "run_seed0", "trajectory.csv")).read()
        assert csv.splitlines()[1:] == []  # header only
        assert "0 epochs" in capsys.readouterr().out

    def test_malformed_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("scene:\n  seed: nope\n")
        assert main(["train", "--config", str(bad)]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == 2
        assert "missing file" in capsys.readouterr().err

    def test_derive_strengths_both_directions(self, capsys):
        assert main(["derive-strengths", "--factors", "1,1,1"]) == 0
        out = capsys.readouterr().out
        assert "strengths 4, 2, 1" in out
        assert main(["derive-strengths", "--strengths", "5,2,1"]) == 0
        assert "factors 2, 1, 1" in capsys.readouterr().out

    def test_derive_strengths_rejects_garbage(self, capsys):
        assert main(["derive-strengths", "--factors", "a,b"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_seed_override_trains_single_run(self, tmp_path):
        text = BASE.replace("seeds: [0]", "seeds: [0, 1]")
        path, out = write_cfg(tmp_path, text=text)
        assert main(["train", "--config", path, "--seed", "1"]) == 0
        assert os.path.exists(os.path.join(out, "run_seed1"))
        assert not os.path.exists(os.path.join(out, "run_seed0"))

    def test_pipeline_determinism_byte_identical(self, tmp_path):
        texts = []
        for name in ("a", "b"):
            out = tmp_path / name
            path = tmp_path / f"{name}.yaml"
            path.write_text(BASE.format(out=out))
            assert main(["generate", "--config", str(path)]) == 0
            assert main(["train", "--config", str(path)]) == 0
            assert main(["eval", "--config", str(path)]) == 0
            texts.append((
                open(out / "run_seed0" / "trajectory.csv", "rb").read(),
                open(out / "eval" / "ap.csv", "rb").read(),
                open(out / "dataset" / "train" / "annotations.txt", "rb").read()))
        assert texts[0] == texts[1]

    def test_dataset_mismatch_detected(self, tmp_path, capsys):
        path, out = write_cfg(tmp_path)
        assert main(["generate", "--config", path]) == 0
        changed = open(path).read().replace("seed: 7", "seed: 8")
        path2 = tmp_path / "exp2.yaml"
        path2.write_text(changed)
        assert main(["train", "--config", str(path2)]) == 2
        assert "dataset" in capsys.readouterr().err
