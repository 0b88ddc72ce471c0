import struct

import numpy as np
import pytest
import yaml

from shcenhance.config import default_config_yaml, load_config, resolve
from shcenhance.enhance import LinearStage, OracleMagnitudeMask, WienerStage
from shcenhance.errors import ConfigError
from shcenhance.serialize import MAGIC, config_hash, load_stages, save_stages
from shcenhance.wavio import read_wav, write_wav


class TestSerialize:
    def test_round_trip(self, tmp_path, cr):
        stages = [LinearStage(cr(3, 4, 4), cr(3, 4)), LinearStage(cr(3, 5, 9), cr(3, 5)),
                  WienerStage(np.ones((4, 3)), floor=0.1), OracleMagnitudeMask()]
        cfg = {"lr": 0.001, "seed": 3}
        path = save_stages(tmp_path / "m.shcm", stages, cfg)
        back, header = load_stages(path)
        assert [s.kind for s in back] == [s.kind for s in stages]
        for a, b in zip(stages[:2], back[:2]):
            assert a.weight.tobytes() == b.weight.tobytes()
            assert a.bias.tobytes() == b.bias.tobytes()
        assert back[2].floor == 0.1
        assert header["config"] == cfg
        assert header["config_hash"] == config_hash(cfg)

    def test_layout(self, tmp_path, cr):
        path = save_stages(tmp_path / "m.shcm", [LinearStage(cr(2, 4, 4))])
        blob = path.read_bytes()
        assert blob[:8] == MAGIC
        version, hlen = struct.unpack("<IQ", blob[8:20])
        assert version == 1
        payload = len(blob) - 20 - hlen
        assert payload == 2 * (2 * 4 * 4 + 2 * 4) * 8

    def test_deterministic_bytes(self, tmp_path, cr):
        st = [LinearStage(cr(2, 4, 4))]
        a = save_stages(tmp_path / "a", st, {"x": 1}).read_bytes()
        b = save_stages(tmp_path / "b", st, {"x": 1}).read_bytes()
        assert a == b

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"NOTASTAGE" + bytes(30))
        with pytest.raises(ConfigError):
            load_stages(p)

    def test_hash_is_order_independent(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})


class TestConfig:
    def test_defaults(self):
        cfg = resolve({})
        assert cfg["array"] == {"kind": "uca", "n_mics": 16, "radius": 0.035, "design_degree": 8}
        assert cfg["room"]["dims"] == [6.0, 5.0, 4.0]
        assert cfg["scene"]["snr_db"] == [-10, -5, 0, 5, 10]
        assert cfg["scene"]["rt60"] == pytest.approx([0.2 + 0.1 * i for i in range(9)])
        assert (cfg["stft"]["win_len"], cfg["stft"]["hop"], cfg["stft"]["n_fft"]) == (400, 200, 400)
        assert cfg["sht"]["order"] == 4
        assert cfg["train"]["lr"] == 1e-3 and cfg["train"]["patience"] == 2

    def test_partial_override(self):
        cfg = resolve({"scene": {"snr_db": [0]}})
        assert cfg["scene"]["snr_db"] == [0]
        assert cfg["scene"]["fs"] == 16000

    @pytest.mark.parametrize("raw", [{"bogus": 1}, {"sht": {"order": 0}}, {"scene": {"rt60": [5]}},
                                     {"stft": {"win_len": 400, "n_fft": 256}}, [1, 2]])
    def test_invalid(self, raw):
        with pytest.raises(ConfigError):
            resolve(raw)

    def test_files(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 5\nsht: {order: 3}\n")
        cfg = load_config(p)
        assert cfg["seed"] == 5 and cfg["sht"]["order"] == 3
        p.write_text("seed: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(p)
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "missing.yaml")
        p.write_text("")
        assert load_config(p) == resolve({})

    def test_default_yaml_round_trips(self):
        assert resolve(yaml.safe_load(default_config_yaml())) == resolve({})


class TestWav:
    @pytest.mark.parametrize("fmt,tol", [("float32", 1e-7), ("pcm16", 1 / 32768)])
    def test_round_trip(self, tmp_path, rng, fmt, tol):
        x = 0.5 * np.clip(rng.standard_normal((3, 500)), -1.9, 1.9)
        path = write_wav(tmp_path / "a.wav", x, 16000, fmt)
        y, fs = read_wav(path)
        assert fs == 16000 and y.shape == (3, 500)
        assert np.abs(y - x).max() <= tol

    def test_mono(self, tmp_path):
        y, _ = read_wav(write_wav(tmp_path / "m.wav", np.zeros(10), 8000))
        assert y.shape == (1, 10)

    def test_bad_format(self, tmp_path):
        with pytest.raises(ValueError):
            write_wav(tmp_path / "x.wav", np.zeros(4), 8000, "mp3")
