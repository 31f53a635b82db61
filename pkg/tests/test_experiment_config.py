"""Tests for experiment configuration loading, validation and builders."""

from __future__ import annotations

import textwrap
from pathlib import Path

import numpy as np
import pytest

from cmi_dps.diffusion.operators import (
    DenseOperator,
    DownsampleOperator,
    GaussianBlurOperator,
    SelectionOperator,
)
from cmi_dps.diffusion.samplers import GuidanceConfig
from cmi_dps.exceptions import ConfigurationError
from cmi_dps.experiment.config import (
    ExperimentConfig,
    ImageSpec,
    OperatorSpec,
    PriorSpec,
    ScheduleSpec,
    build_model,
    build_noise,
    build_noise_schedule,
    build_operator,
    build_prior,
    consistency_errors,
    load_config,
    validate_config,
)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "experiment.yml"
    path.write_text(textwrap.dedent(text), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Defaults
# ---------------------------------------------------------------------------


class TestDefaults:
    def test_default_values(self):
        config = ExperimentConfig()
        assert config.prior.kind == "random_mixture"
        assert config.dimension == 16
        assert config.schedule.n_steps == 100
        assert config.noise_sigma == 0.05
        assert [s.mode for s in config.samplers] == ["dps", "cmi_dps"]
        assert config.samplers[1].eta0 == 0.05
        assert config.samplers[1].probes == 8
        assert config.image_dims is None

    def test_missing_file_gives_defaults(self, tmp_path):
        config = load_config(tmp_path / "absent.yml")
        assert config == ExperimentConfig()

    def test_empty_file_gives_defaults(self, tmp_path):
        assert load_config(_write(tmp_path, "")) == ExperimentConfig()

    def test_as_dict_is_plain(self):
        data = ExperimentConfig().as_dict()
        assert data["schedule"]["n_steps"] == 100
        assert data["samplers"][0]["mode"] == "dps"


# ---------------------------------------------------------------------------
# Loading errors
# ---------------------------------------------------------------------------


class TestLoadErrors:
    def test_invalid_value_reports_field_and_line(self, tmp_path):
        path = _write(
            tmp_path,
            """\
            prior:
              kind: standard_normal
              dimension: 4
            schedule:
              n_steps: 0
            """,
        )
        with pytest.raises(ConfigurationError, match=r"schedule\.n_steps") as excinfo:
            load_config(path)
        assert excinfo.value.line == 5
        assert str(excinfo.value).startswith("line 5:")

    def test_unknown_key(self, tmp_path):
        path = _write(
            tmp_path,
            """\
            prior:
              kind: standard_normal
              bogus: 3
            """,
        )
        with pytest.raises(ConfigurationError, match="bogus") as excinfo:
            load_config(path)
        assert excinfo.value.line == 3

    def test_sampler_entry_located(self, tmp_path):
        path = _write(
            tmp_path,
            """\
            samplers:
              - mode: dps
              - mode: cmi_dps
                eta0: -1.0
            """,
        )
        with pytest.raises(ConfigurationError, match=r"samplers\.1\.eta0") as excinfo:
            load_config(path)
        assert excinfo.value.line == 4

    def test_unknown_mode(self, tmp_path):
        path = _write(tmp_path, "samplers:\n  - mode: langevin\n")
        with pytest.raises(ConfigurationError, match="mode"):
            load_config(path)

    def test_yaml_syntax_error(self, tmp_path):
        path = _write(tmp_path, "prior:\n  kind: [standard_normal\nbatch: 2\n")
        with pytest.raises(ConfigurationError, match="invalid YAML") as excinfo:
            load_config(path)
        assert excinfo.value.line is not None

    def test_top_level_must_be_mapping(self, tmp_path):
        path = _write(tmp_path, "- 1\n- 2\n")
        with pytest.raises(ConfigurationError, match="mapping"):
            load_config(path)

    def test_inconsistent_image_located(self, tmp_path):
        path = _write(
            tmp_path,
            """\
            prior:
              dimension: 16
            image:
              height: 3
              width: 3
            """,
        )
        with pytest.raises(ConfigurationError, match="does not hold") as excinfo:
            load_config(path)
        assert excinfo.value.line == 4

    def test_configuration_error_is_value_error(self, tmp_path):
        path = _write(tmp_path, "batch: 0\n")
        with pytest.raises(ValueError, match="batch"):
            load_config(path)


# ---------------------------------------------------------------------------
# Cross-field validation
# ---------------------------------------------------------------------------


class TestConsistency:
    def test_defaults_are_consistent(self):
        assert consistency_errors(ExperimentConfig()) == []

    def test_duplicate_labels(self):
        config = ExperimentConfig(
            samplers=(GuidanceConfig(mode="dps"), GuidanceConfig(mode="dps"))
        )
        [(location, message)] = consistency_errors(config)
        assert location == ("samplers", 1)
        assert "duplicate" in message

    def test_labels_disambiguate(self):
        config = ExperimentConfig(
            samplers=(
                GuidanceConfig(mode="dps"),
                GuidanceConfig(mode="dps", zeta0=0.5, label="dps_small"),
            )
        )
        assert consistency_errors(config) == []

    def test_image_operator_needs_image(self):
        config = ExperimentConfig(operator=OperatorSpec(kind="blur"))
        with pytest.raises(ConfigurationError, match="needs an image"):
            validate_config(config)

    def test_box_mask_needs_box(self):
        config = ExperimentConfig(
            image=ImageSpec(height=4, width=4), operator=OperatorSpec(kind="box_mask")
        )
        with pytest.raises(ConfigurationError, match="needs a box"):
            validate_config(config)

    def test_even_blur_kernel(self):
        config = ExperimentConfig(
            image=ImageSpec(height=4, width=4),
            operator=OperatorSpec(kind="blur", kernel_size=4),
        )
        with pytest.raises(ConfigurationError, match="odd"):
            validate_config(config)

    def test_downsample_factor_must_divide(self):
        config = ExperimentConfig(
            image=ImageSpec(height=4, width=4),
            operator=OperatorSpec(kind="downsample", factor=3),
        )
        with pytest.raises(ConfigurationError, match="does not divide"):
            validate_config(config)

    def test_beta_order(self):
        config = ExperimentConfig(schedule=ScheduleSpec(beta_min=0.02, beta_max=0.01))
        with pytest.raises(ConfigurationError, match="beta_min"):
            validate_config(config)

    def test_rescaled_beta_must_stay_below_one(self):
        config = ExperimentConfig(schedule=ScheduleSpec(n_steps=10))
        with pytest.raises(ConfigurationError, match="reference_steps"):
            validate_config(config)

    def test_mixture_components_checked(self):
        prior = PriorSpec(
            kind="gaussian_mixture",
            dimension=2,
            weights=(0.5, 0.4),
            means=((0.0, 0.0), (1.0, 1.0)),
            covariances=(((1.0, 0.0), (0.0, 1.0)), ((1.0, 0.0), (0.0, 1.0))),
        )
        messages = [m for _, m in consistency_errors(ExperimentConfig(prior=prior))]
        assert "weights must sum to 1" in messages

    def test_diagnostics_step_within_schedule(self, tmp_path):
        path = _write(
            tmp_path,
            """\
            schedule:
              n_steps: 10
              reference_steps: null
            diagnostics:
              t: 20
            """,
        )
        with pytest.raises(ConfigurationError, match="n_steps=10"):
            load_config(path)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


class TestBuilders:
    def test_random_mixture_is_seeded(self):
        spec = PriorSpec(dimension=4, components=3, prior_seed=2)
        a, b = build_prior(spec), build_prior(spec)
        np.testing.assert_array_equal(a.means, b.means)
        assert a.n_components == 3
        np.testing.assert_allclose(a.weights, 1.0 / 3.0)
        np.testing.assert_allclose(a.covariances[0], 0.09 * np.eye(4))

    def test_random_mixture_seed_changes_means(self):
        a = build_prior(PriorSpec(dimension=4, prior_seed=0))
        b = build_prior(PriorSpec(dimension=4, prior_seed=1))
        assert not np.array_equal(a.means, b.means)

    def test_standard_normal_prior(self):
        prior = build_prior(PriorSpec(kind="standard_normal", dimension=3))
        np.testing.assert_array_equal(prior.means, np.zeros((1, 3)))

    def test_explicit_mixture(self):
        prior = build_prior(
            PriorSpec(
                kind="gaussian_mixture",
                dimension=1,
                weights=(0.25, 0.75),
                means=((-1.0,), (2.0,)),
                covariances=(((0.5,),), ((1.5,),)),
            )
        )
        np.testing.assert_array_equal(prior.means[:, 0], [-1.0, 2.0])

    def test_schedule_rescaled_to_reference(self):
        schedule = build_noise_schedule(
            ScheduleSpec(n_steps=10, beta_min=1e-4, beta_max=0.02, reference_steps=100)
        )
        assert schedule.n_steps == 10
        assert schedule.beta(10) == pytest.approx(0.2)

    @pytest.mark.parametrize(
        ("operator", "expected_type", "out_dim"),
        [
            (OperatorSpec(kind="identity"), DenseOperator, 16),
            (OperatorSpec(kind="mask", keep_fraction=0.5), SelectionOperator, 8),
            (OperatorSpec(kind="box_mask", box=(1, 1, 2, 2)), SelectionOperator, 12),
            (OperatorSpec(kind="blur", kernel_size=3), GaussianBlurOperator, 16),
            (OperatorSpec(kind="downsample", factor=2), DownsampleOperator, 4),
        ],
    )
    def test_build_operator(self, operator, expected_type, out_dim):
        config = ExperimentConfig(image=ImageSpec(height=4, width=4), operator=operator)
        A = build_operator(config)
        assert isinstance(A, expected_type)
        assert A.in_dim == 16
        assert A.out_dim == out_dim

    def test_mask_is_seeded(self):
        config = ExperimentConfig(operator=OperatorSpec(kind="mask", mask_seed=3))
        a, b = build_operator(config), build_operator(config)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_noise_matches_operator(self):
        config = ExperimentConfig(noise_sigma=0.1)
        A = build_operator(config)
        noise = build_noise(config, A)
        assert noise.dim == A.out_dim
        assert noise.variance == pytest.approx(0.01)

    def test_model_dimension(self):
        config = ExperimentConfig(prior=PriorSpec(dimension=5))
        schedule = build_noise_schedule(config.schedule)
        model = build_model(build_prior(config.prior), schedule)
        assert model.dimension == 5


# ---------------------------------------------------------------------------
# Shipped configuration files
# ---------------------------------------------------------------------------


class TestShippedConfigs:
    def test_default_path(self):
        config = load_config()
        assert config.dimension == 16
        assert config.schedule.reference_steps == 1000

    @pytest.mark.parametrize(
        "name",
        [
            "experiment.yml",
            "gaussian_check.yml",
            "gmm_inpainting.yml",
            "gmm_deblur.yml",
        ],
    )
    def test_loads(self, name):
        config = load_config(CONFIG_DIR / name)
        assert consistency_errors(config) == []

    def test_gaussian_check_uses_exact_cmi(self):
        config = load_config(CONFIG_DIR / "gaussian_check.yml")
        assert config.prior.kind == "standard_normal"
        assert config.samplers[1].cmi_mode == "exact"

    def test_inpainting_compares_four_samplers(self):
        config = load_config(CONFIG_DIR / "gmm_inpainting.yml")
        assert [s.name for s in config.samplers] == [
            "dps",
            "cmi_dps",
            "pigdm",
            "cmi_pigdm",
        ]
        assert config.image_dims == (4, 4)
