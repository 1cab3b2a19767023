from pathlib import Path

import pytest

from app.backend.core.config import BASE_DIR, force_deterministic, get_settings

PATH_FIELDS = ("DATA_DIR", "MNIST_DIR", "DATASETS_DIR", "RUNS_DIR")


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    # без .env и без переопределений путей
    monkeypatch.chdir(tmp_path)
    for name in PATH_FIELDS + ("DCL_THREADS",):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()


class TestSettings:
    def test_path_defaults(self, clean_env):
        s = get_settings()
        for name in PATH_FIELDS:
            assert isinstance(getattr(s, name), str)
        assert Path(s.DATA_DIR) == BASE_DIR / "data"
        assert Path(s.MNIST_DIR) == BASE_DIR / "data" / "mnist"
        assert Path(s.DATASETS_DIR).parent == Path(s.DATA_DIR)
        assert Path(s.RUNS_DIR).parent == Path(s.DATA_DIR)
        assert s.DCL_THREADS == 1 and s.DCL_DETERMINISTIC is False

    def test_env_override(self, clean_env, monkeypatch, tmp_path):
        monkeypatch.setenv("MNIST_DIR", str(tmp_path / "mnist"))
        monkeypatch.setenv("DCL_THREADS", "4")
        s = get_settings()
        assert s.MNIST_DIR == str(tmp_path / "mnist")
        assert s.DCL_THREADS == 4

    def test_threads_must_be_positive(self, clean_env, monkeypatch):
        from pydantic import ValidationError

        monkeypatch.setenv("DCL_THREADS", "0")
        with pytest.raises(ValidationError):
            get_settings()

    def test_force_deterministic(self, clean_env, monkeypatch):
        monkeypatch.setenv("DCL_DETERMINISTIC", "false")
        assert force_deterministic().DCL_DETERMINISTIC is True
        assert get_settings().DCL_DETERMINISTIC is True
