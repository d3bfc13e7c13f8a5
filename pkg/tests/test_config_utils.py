import numpy as np
import pytest

from config_utils import (
    ConfigError,
    ExperimentConfig,
    available_presets,
    default_config,
    dump_config,
    get_env_choices,
    load_config,
    parse_config_text,
    preset_path,
    split_choices,
    validate_config,
)
from estimation import StudyConfig
from geometry import SourceKind
from statistics_utils import ReferenceScheme


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ("HBT_OUT_DIR", "HBT_THREADS", "STORAGE_TYPE", "HBT_ORDERS"):
        monkeypatch.delenv(name, raising=False)


def test_split_choices():
    assert split_choices(" 2, 3 ,,4 ") == ["2", "3", "4"]


def test_get_env_choices(monkeypatch):
    assert get_env_choices("HBT_ORDERS", ["2"]) == ["2"]
    monkeypatch.setenv("HBT_ORDERS", "3,4")
    assert get_env_choices("HBT_ORDERS") == ["3", "4"]


def test_defaults():
    config = default_config()
    assert config == ExperimentConfig()
    assert config.pixel_count == 401
    assert config.orders == (2, 3, 4, 5)
    assert config.seed == 20140601
    assert validate_config(config) == (True, "")


def test_environment_overrides_defaults(monkeypatch):
    monkeypatch.setenv("HBT_OUT_DIR", "elsewhere")
    monkeypatch.setenv("HBT_THREADS", "4")
    monkeypatch.setenv("STORAGE_TYPE", "CSV")
    monkeypatch.setenv("HBT_ORDERS", "2,3")
    config = default_config()
    assert config.out_dir == "elsewhere"
    assert config.threads == 4
    assert config.storage_type == "CSV"
    assert config.orders == (2, 3)


def test_file_overrides_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("HBT_ORDERS", "2,3")
    path = tmp_path / "run.env"
    path.write_text("ORDERS=4\nSEED=9\n")
    config = load_config(str(path))
    assert config.orders == (4,)
    assert config.seed == 9


def test_round_trip_is_identity():
    config = ExperimentConfig(source_kind="slit", source_dimension_um=200.0, angular_diameter_rad=5e-4,
                              orders=(2, 4), scheme="distinct", separation=182, reference_pixel=150,
                              nu_list=(0.2, 0.9), estimate_chi=True, data_file="frames.hbtf",
                              tolerance=1e-9, storage_type="CSV")
    assert parse_config_text(dump_config(config)) == config
    assert parse_config_text(dump_config(ExperimentConfig())) == ExperimentConfig()


def test_comments_blank_lines_and_export():
    text = "# study\n\nexport SEED=12\nPLOT=yes\n"
    config = parse_config_text(text)
    assert config.seed == 12
    assert config.plot is True


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text("SEED=1\n\nCOLOUR=blue\n", path="run.env")
    assert info.value.line == 3
    assert str(info.value).startswith("run.env:3:")


def test_malformed_value_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text("SEED=1\nFRAMES=many\n", path="run.env")
    assert info.value.line == 2
    assert "FRAMES" in info.value.message


def test_missing_equals_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text("SEED=1\nORDERS\n", path="run.env")
    assert info.value.line == 2


@pytest.mark.parametrize("text, key", [
    ("NOISE_NU=1.5", "NOISE_NU"),
    ("ORDERS=1,2", "ORDERS"),
    ("SEPARATION=0", "SEPARATION"),
    ("SCHEME=diagonal", "SCHEME"),
    ("SOURCE_KIND=triangle", "SOURCE_KIND"),
    ("D_RANGE=5,1,1", "D_RANGE"),
    ("REPETITIONS=1", "REPETITIONS"),
    ("STORAGE_TYPE=SQLite", "STORAGE_TYPE"),
])
def test_invalid_settings_are_rejected(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config_text("SEED=1\n" + text + "\n", path="run.env")
    assert info.value.line == 2
    assert key in info.value.message


def test_validate_config_tuple():
    is_valid, error_message = validate_config(ExperimentConfig(threads=0))
    assert not is_valid
    assert error_message.startswith("THREADS")


def test_model_objects():
    config = ExperimentConfig(source_dimension_um=150.0, pixel_pitch_um=5.0, wavelength_nm=500.0,
                              noise_nu=0.4, noise_sigma=0.02, scheme="distinct", separation=100)
    source = config.source_geometry()
    assert source.kind is SourceKind.CIRCULAR_DISC
    assert source.dimension == pytest.approx(150e-6)
    assert config.detector_array().pixel_pitch == pytest.approx(5e-6)
    assert config.detector_array().wavelength == pytest.approx(500e-9)
    assert config.noise_model().chi == pytest.approx(0.05)
    study = config.study_config(repetitions=5)
    assert isinstance(study, StudyConfig)
    assert study.scheme is ReferenceScheme.DISTINCT
    assert study.repetitions == 5


def test_ranges():
    config = ExperimentConfig(d_range=(1, 10, 3), sigma_range=(0.0, 0.05, 6))
    assert config.d_values() == [1, 4, 7, 10]
    np.testing.assert_allclose(config.sigma_values(), [0.0, 0.01, 0.02, 0.03, 0.04, 0.05])


@pytest.mark.parametrize("name", ["table_1", "table_2", "fig_3", "fig_4", "fig_5", "fig_6", "fig_7", "smoke"])
def test_presets_load(name):
    assert name in available_presets()
    config = load_config(preset_path(name))
    assert validate_config(config)[0]


def test_table_2_preset():
    config = load_config(preset_path("table_2"))
    assert config.scheme == "distinct"
    assert config.separation == 182
    assert config.orders == (2, 3, 4)
    assert config.estimate_chi


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset_path("table_9")
