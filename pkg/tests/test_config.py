import pytest

from bezierbot.config import Config, ConfigError, ObstacleConfig, from_dict, load_config
from bezierbot.control import ControllerGains


def write(tmp_path, text):
    path = tmp_path / "cfg.toml"
    path.write_text(text)
    return path


def test_no_file_gives_defaults():
    cfg = load_config()
    assert isinstance(cfg, Config)
    assert cfg.experiment.task == "regulate" and cfg.experiment.gains is None
    assert cfg.collect.samples == 1000 and cfg.experiment.n_ticks == 200


def test_sections_and_nested_tables(tmp_path):
    path = write(tmp_path, """
[plant]
epsilon = 0.0
[train]
epochs = 5
hidden = [16, 16]
[experiment]
task = "track"
duration = 2.0
snapshot_ticks = [0, 10]
[experiment.gains]
lam_s = 3.0
[experiment.avoidance]
d_w = 30.0
[experiment.obstacle]
placement = "en-route"
offset = 0.03
""")
    cfg = load_config(path)
    assert cfg.plant.epsilon == 0.0
    assert cfg.train.epochs == 5 and cfg.train.hidden == (16, 16)
    exp = cfg.experiment
    assert exp.task == "track" and exp.snapshot_ticks == (0, 10)
    assert exp.gains == ControllerGains(lam_s=3.0)
    assert exp.avoidance.d_w == 30.0 and exp.obstacle.offset == 0.03


def test_paths_resolve_against_config_directory(tmp_path):
    cfg = load_config(write(tmp_path, "[collect]\nshape_out = 'x/s.csv'\n"))
    assert cfg.path(cfg.collect.shape_out) == tmp_path / "x" / "s.csv"
    assert cfg.path("/abs/p.csv").as_posix() == "/abs/p.csv"


def test_views_share_settings():
    cfg = from_dict({"view": {"scale": 500.0}})
    v1, v2 = cfg.views()
    assert (v1.view_id, v2.view_id) == (1, 2) and v1.scale == v2.scale == 500.0


@pytest.mark.parametrize("text", [
    "[nonsense]\na = 1\n",
    "[plant]\nwobble = 2\n",
    "[experiment]\ntask = 'dance'\n",
    "[experiment]\nduration = -1.0\n",
    "[experiment.gains]\nlam_s = 0.0\n",
    "[experiment.obstacle]\nplacement = 'teleport'\n",
    "[experiment.obstacle]\nplacement = 'trajectory'\n",
    "[experiment.avoidance]\nalpha = -2.0\n",
    "plant = 3\n",
    "experiment = 3\n",
    "[train]\nepochs = -1\n",
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text))


def test_malformed_toml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[plant\n"))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.toml")


def test_round_trip_through_dict():
    cfg = from_dict({"experiment": {"task": "self-motion", "obstacle": {"placement": "approach"}}})
    d = cfg.to_dict()
    assert "base_dir" not in d
    assert d["experiment"]["obstacle"]["placement"] == "approach"


def test_obstacle_defaults():
    oc = ObstacleConfig()
    assert oc.placement == "fixed" and oc.fraction == 0.5 and oc.offset == 0.04
