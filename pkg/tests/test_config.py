"""Config parsing: defaults, INI round trip, strict key checking."""

import pytest

from voxdiff.config import (
    ClassifierSettings,
    DenoiserSettings,
    DetectSettings,
    EvalSettings,
    PipelineConfig,
    StageBudget,
    load_config,
    save_config,
)
from voxdiff.diffusion import SamplerConfig


class TestDefaults:
    def test_no_file_gives_desk_scale_defaults(self):
        cfg = load_config()
        assert cfg.phantom.grid_dims == (48, 48, 64)
        assert cfg.phantom.spacing == (1.0, 1.0, 1.0)
        assert cfg.denoiser.timesteps == 1000
        assert cfg.sampler.mode == "ddim"
        assert cfg.sampler.stride == 20
        assert cfg.sampler.noise_level == 500
        assert cfg.detect.target_spacing_mm == 1.0

    def test_postprocess_and_eval_defaults(self):
        cfg = load_config()
        assert cfg.postprocess.min_voxels == 20
        assert cfg.postprocess.min_diameter_mm == 3.0
        assert cfg.postprocess.morph_connectivity == 6
        assert cfg.postprocess.component_connectivity == 26
        assert cfg.eval.iou_threshold == 0.2
        assert cfg.eval.size_bin_edges_cm == (2.0, 4.0, 7.0)

    def test_seed_threads_into_sub_configs(self):
        cfg = load_config(overrides={"run.seed": "17"})
        assert cfg.seed == 17
        assert cfg.phantom.seed == 17
        assert cfg.codec.seed == 17
        assert cfg.sampler.seed == 17


class TestParsing:
    def test_file_values_override_defaults(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[phantom]\ngrid = 16 16 24\nn_kidneys = 1\n"
                     "kidney_semiaxes_mm = 4 5\nlesion_diameter_mm = 3 6\n"
                     "[sampler]\nmode = ddpm\nnoise_level = 250\n")
        cfg = load_config(p)
        assert cfg.phantom.grid_dims == (16, 16, 24)
        assert cfg.phantom.n_kidneys == 1
        assert cfg.sampler.mode == "ddpm"
        assert cfg.sampler.noise_level == 250

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[sempler]\nmode = ddim\n")
        with pytest.raises(ValueError, match=r"unknown config section \[sempler\]"):
            load_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[sampler]\nnoise_lvl = 250\n")
        with pytest.raises(ValueError, match="unknown config key sampler.noise_lvl"):
            load_config(p)

    def test_unknown_override_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(overrides={"sampler.bogus": "1"})

    def test_override_beats_file(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[run]\nseed = 5\n")
        cfg = load_config(p, overrides={"run.seed": "9"})
        assert cfg.seed == 9

    def test_tuple_arity_checked(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[phantom]\ngrid = 16 16\n")
        with pytest.raises(ValueError, match="expected 3 values"):
            load_config(p)

    def test_bad_boolean_rejected(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[codec]\nidentity = maybe\n")
        with pytest.raises(ValueError, match="not a boolean"):
            load_config(p)


class TestInvariants:
    def test_noise_level_cannot_exceed_schedule(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[denoiser]\ntimesteps = 100\n[sampler]\nnoise_level = 101\n")
        with pytest.raises(ValueError, match="noise level exceeds"):
            load_config(p)

    def test_classifier_level_cannot_exceed_schedule(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[denoiser]\ntimesteps = 100\n"
                     "[classifier]\nmax_level = 200\n"
                     "[sampler]\nnoise_level = 50\n")
        with pytest.raises(ValueError, match="max_level exceeds"):
            load_config(p)

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            StageBudget(steps=-1)
        with pytest.raises(ValueError):
            StageBudget(base_channels=0)
        with pytest.raises(ValueError):
            DenoiserSettings(timesteps=0)

    def test_detect_settings_validation(self):
        with pytest.raises(ValueError):
            DetectSettings(patch_mm=(0.0, 32.0, 32.0))
        with pytest.raises(ValueError):
            DetectSettings(target_spacing_mm=-1.0)

    def test_eval_edges_must_increase(self):
        with pytest.raises(ValueError):
            EvalSettings(size_bin_edges_cm=(4.0, 2.0))
        with pytest.raises(ValueError):
            EvalSettings(size_bin_edges_cm=(-1.0, 2.0))


class TestRoundTrip:
    def test_save_then_load_is_identity(self, tmp_path):
        cfg = load_config(overrides={
            "run.seed": "7",
            "phantom.noise_sigma": "0.02",
            "codec.identity": "true",
            "denoiser.steps": "123",
            "classifier.balance": "false",
            "sampler.mode": "ddpm",
            "sampler.guidance_scale": "1600",
            "postprocess.min_voxels": "10",
            "eval.size_bins_cm": "1 3 5",
            "paths.out_dir": "elsewhere",
        })
        path = tmp_path / "dump.ini"
        save_config(path, cfg)
        assert load_config(path) == cfg

    def test_defaults_round_trip(self, tmp_path):
        cfg = load_config()
        path = tmp_path / "dump.ini"
        save_config(path, cfg)
        assert load_config(path) == cfg

    def test_direct_construction_checks_level_invariant(self):
        with pytest.raises(ValueError, match="noise level exceeds"):
            PipelineConfig(denoiser=DenoiserSettings(timesteps=100),
                           sampler=SamplerConfig(noise_level=500),
                           classifier=ClassifierSettings(max_level=50))
