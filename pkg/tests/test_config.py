import textwrap
from pathlib import Path

import numpy as np
import pytest

from tangentlab import library
from tangentlab.characteristics import is_tangent, model_characteristics
from tangentlab.config import ConfigError, load_experiment, load_model, parse_model

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text).lstrip())
    return p


class TestModelFiles:
    def test_mixed_file_matches_library(self):
        model = load_model(CONFIGS / "mixed_2d.toml")
        ok, dev = is_tangent(model_characteristics(model), model_characteristics(library.mixed_2d()))
        assert ok, f"file model differs from the library model by {dev}"

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("models/*.toml")))
    def test_shipped_models_load(self, path):
        model = load_model(path)
        assert model.dim >= 1, f"{path.name} loads"

    def test_library_with_parameters(self):
        m = parse_model({"library": "poisson", "rate": 2.5})
        assert model_characteristics(m).compensator.lam(1.0)[0] == pytest.approx(2.5), "rate passed through"

    def test_unknown_library(self, tmp_path):
        p = write(tmp_path, "m.toml", 'library = "nope"\n')
        with pytest.raises(ConfigError, match="unknown library"):
            load_model(p)

    def test_history_table_and_feedback(self, tmp_path):
        p = write(
            tmp_path,
            "m.toml",
            """
            dim = 1
            horizon = 1.0

            [continuous]
            mesh = [0.0, 0.5, 1.0]
            matrices = [[[1.0]], [[0.5]]]
            feedback = { kind = "tanh", kappa = 0.3, weights = [1.0] }
            time_change = { times = [0.0, 1.0], values = [0.0, 2.0] }

            [qlc]
            marks = [[1.0]]
            feedback = { kind = "after_first_jump", factor = 2.0 }
            [[qlc.intensity]]
            times = [0.0, 0.5, 1.0]
            values = [0.0, 0.5, 2.0]

            [accessible]
            times = [0.3, 0.6]
            [[accessible.laws]]
            values = [[1.0], [-1.0]]
            probs = [0.5, 0.5]
            [[accessible.laws]]
            default = { values = [[1.0], [-1.0]], probs = [0.5, 0.5] }
            table = [ { history = [[1.0]], values = [[2.0], [-2.0]], probs = [0.5, 0.5] } ]
            """,
        )
        m = load_model(p)
        assert not m.deterministic and m.parts_present() == ["continuous", "qlc", "accessible"], "all parts parsed"
        assert m.accessible.law(1, np.array([[1.0]])).values.max() == 2.0, "history table entry"
        assert m.accessible.law(1, np.array([[-1.0]])).values.max() == 1.0, "history default"

    def test_invalid_law_has_line(self, tmp_path):
        p = write(
            tmp_path,
            "m.toml",
            """
            dim = 1
            horizon = 1.0
            [accessible]
            times = [0.5]
            [[accessible.laws]]
            values = [[1.0], [-1.0]]
            probs = [0.6, 0.4]
            """,
        )
        with pytest.raises(ConfigError) as err:
            load_model(p)
        assert "mean ≠ 0" in str(err.value) and err.value.line is not None, str(err.value)

    def test_rate_count_mismatch_line(self, tmp_path):
        p = write(tmp_path, "m.toml", "dim = 1\nhorizon = 1.0\n[qlc]\nmarks = [[1.0], [2.0]]\nrates = [1.0]\n")
        with pytest.raises(ConfigError) as err:
            load_model(p)
        assert err.value.line == 5, f"anchored at the rates line: {err.value}"

    def test_parse_error_line(self, tmp_path):
        p = write(tmp_path, "m.toml", "dim = 1\nhorizon = = 1\n")
        with pytest.raises(ConfigError) as err:
            load_model(p)
        assert err.value.line == 2 and str(err.value).startswith(f"{p}:2:"), str(err.value)


class TestExperimentFiles:
    def test_smoke_config(self):
        cfg = load_experiment(CONFIGS / "smoke.toml")
        assert cfg.seed == 20241014 and len(cfg.checks) >= 5, "experiment parsed"
        assert len(cfg.sha256) == 64, "content hash"

    def test_seed_required(self, tmp_path):
        p = write(tmp_path, "e.toml", '[model]\nlibrary = "zero"\n')
        with pytest.raises(ConfigError, match="seed"):
            load_experiment(p)
        assert load_experiment(p, seed_override=4).seed == 4, "seed from the command line"

    def test_minimum_paths(self, tmp_path):
        p = write(tmp_path, "e.toml", 'seed = 1\n[model]\nlibrary = "zero"\n\n[[checks]]\nkind = "sup_ratio"\nn = 10\n')
        with pytest.raises(ConfigError) as err:
            load_experiment(p)
        assert err.value.line == 5 and "minimum of 100" in str(err.value), str(err.value)

    def test_missing_model_file(self, tmp_path):
        p = write(tmp_path, "e.toml", 'seed = 1\n[model]\nfile = "absent.toml"\n')
        with pytest.raises(ConfigError, match="not found"):
            load_experiment(p)

    def test_order_models(self, tmp_path):
        p = write(
            tmp_path,
            "e.toml",
            """
            seed = 1
            [[checks]]
            kind = "order"
            model_n = { library = "poisson", rate = 1.0 }
            model_m = { library = "poisson", rate = 2.0 }
            """,
        )
        cfg = load_experiment(p)
        assert set(cfg.checks[0].models) == {"model_n", "model_m"}, "per-check models"
