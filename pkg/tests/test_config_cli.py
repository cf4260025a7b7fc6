import json

import numpy as np
import pytest

from udap import cli, config, evalreport, storage


def test_defaults_resolve():
    cfg = config.resolve()
    assert cfg["purify"]["tau"] == 4e-3 and cfg["purify"]["K"] == 100


def test_unknown_key_names_field():
    with pytest.raises(config.ConfigError) as exc:
        config.resolve({"purify": {"kk": 3}})
    assert exc.value.field == "purify.kk"


@pytest.mark.parametrize("doc,field", [
    ({"purify": {"K": "ten"}}, "purify.K"),
    ({"purify": {"gate": 1}}, "purify.gate"),
    ({"purify": {"tau": 0}}, "purify.tau"),
    ({"attack": {"family": "pixel"}}, "attack.family"),
    ({"purify": {"t_hat": 30}}, "purify.t_hat"),
    ({"purify": 3}, "purify"),
])
def test_bad_values_name_field(doc, field):
    with pytest.raises(config.ConfigError) as exc:
        config.resolve(doc)
    assert exc.value.field == field


def test_precedence_defaults_file_flags():
    cfg = config.resolve({"purify": {"lr": 0.05, "K": 7}}, {"purify": {"K": 9}})
    assert cfg["purify"]["lr"] == 0.05 and cfg["purify"]["K"] == 9 and cfg["purify"]["t_hat"] == 10


def test_int_accepted_for_float_field():
    assert isinstance(config.resolve({"purify": {"lr": 1}})["purify"]["lr"], float)


def _args(argv):
    return cli.build_parser().parse_args(argv)


def test_cli_flags_override_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"purify": {"K": 5, "tau": 0.01}}))
    cfg = cli._resolve(_args(["purify", "--config", str(f), "--k", "0", "--out", "o"]))
    assert cfg["purify"]["K"] == 0 and cfg["purify"]["tau"] == 0.01


def test_env_seed_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("UDAP_SEED", "17")
    assert cli._resolve(_args(["calibrate"]))["seed"] == 17
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 3}))
    assert cli._resolve(_args(["calibrate", "--config", str(f)]))["seed"] == 3
    assert cli._resolve(_args(["calibrate", "--config", str(f), "--seed", "5"]))["seed"] == 5


def test_relative_sweep_scales_with_tau():
    cfg = config.resolve({"purify": {"tau": 8e-3}})
    assert cli.sweep_taus(cfg) == [4e-3, 6e-3, 8e-3, 1e-2]
    cfg = config.resolve({"purify": {"tau": 8e-3}, "sweep": {"relative": False, "taus": [1e-3]}})
    assert cli.sweep_taus(cfg) == [1e-3]


# ---------------------------------------------------------------- end to end on a small saved bundle


@pytest.fixture
def workspace(tmp_path, tiny_bundle, tiny_images):
    storage.save_bundle(tiny_bundle, tmp_path / "bundle")
    storage.write_image_dir(tmp_path / "imgs", [f"{i:04d}" for i in range(3)], tiny_images[:3])
    return tmp_path


def test_purify_k0_passthrough(workspace, capsys):
    w = workspace
    code = cli.main(["purify", "--bundle", str(w / "bundle"), "--images", str(w / "imgs"),
                     "--out", str(w / "p"), "--k", "0"])
    assert code == 0
    rows = evalreport.load_metrics(w / "p" / "metrics.csv")
    assert [v for _, _, m, v in rows if m == "epochs_run"] == [0.0, 0.0, 0.0]
    s = evalreport.load_summary(w / "p" / "summary.json")
    assert s["config"]["purify"]["K"] == 0 and s["failed"] == []
    assert len(list((w / "p" / "images").iterdir())) == 3


def test_calibrate_prints_tau(workspace, capsys, tiny_bundle, tiny_images):
    from udap.purify import calibrate_tau

    w = workspace
    single = w / "one"
    storage.write_image_dir(single, ["0000"], tiny_images[:1])
    assert cli.main(["calibrate", "--bundle", str(w / "bundle"), "--images", str(single)]) == 0
    got = json.loads(capsys.readouterr().out)["tau"]
    assert got == calibrate_tau(storage.read_image_dir(single)[1], tiny_bundle, 10)


def test_sweep_prints_one_row_per_tau(workspace, capsys):
    w = workspace
    code = cli.main(["sweep-tau", "--bundle", str(w / "bundle"), "--images", str(w / "imgs"),
                     "--out", str(w / "s"), "--taus", "1e9", "2e9", "--k", "2"])
    assert code == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["tau"] for r in rows] == [1e9, 2e9]
    assert all(r["mean_epochs"] == 0.0 and r["threshold_met"] == 3 for r in rows)


def test_missing_bundle_is_json_error(tmp_path, capsys):
    code = cli.main(["purify", "--bundle", str(tmp_path / "none"), "--images", str(tmp_path), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_ERROR
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "missing_dependency" and "bundle.json" in err["message"]
    assert json.loads((tmp_path / "o" / "error.json").read_text()) == err


def test_config_error_exit_code(tmp_path, capsys):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"purify": {"bogus": 1}}))
    assert cli.main(["gen-data", "--config", str(f), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert json.loads(capsys.readouterr().err)["field"] == "purify.bogus"


def test_gen_data_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["gen-data", "--n", "4", "--seed", "2", "--out", str(tmp_path / d)]) == 0
    a = storage.read_image_dir(tmp_path / "a" / "images")[1]
    b = storage.read_image_dir(tmp_path / "b" / "images")[1]
    assert np.array_equal(a, b) and a.shape == (4, 1, 32, 32)
    assert evalreport.load_summary(tmp_path / "a" / "summary.json")["config"]["data"]["seed"] == 2
