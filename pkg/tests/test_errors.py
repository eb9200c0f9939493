import pytest
import yaml
from pydantic import ValidationError

from phenldiff.middleware.error_handler import EXIT_UNEXPECTED, exit_code_for, handle_errors
from phenldiff.middleware.exceptions import (
    ConfigError,
    InsufficientDataError,
    NumericalError,
    StageError,
    StorageError,
)
from phenldiff.schemas import ExperimentConfig


def _validation_error() -> ValidationError:
    try:
        ExperimentConfig.model_validate({"unknown": 1})
    except ValidationError as e:
        return e
    raise AssertionError("expected a validation error")


def test_exit_codes() -> None:
    assert exit_code_for(ConfigError("seed", "bad")) == 2
    assert exit_code_for(InsufficientDataError(2, 1)) == 3
    assert exit_code_for(NumericalError("nan")) == 4
    assert exit_code_for(StorageError("x", "gone")) == 5
    assert exit_code_for(_validation_error()) == 2
    assert exit_code_for(yaml.YAMLError()) == 2
    assert exit_code_for(FileNotFoundError()) == 5
    assert exit_code_for(KeyError("x")) == EXIT_UNEXPECTED


def test_stage_error_keeps_the_cause_category() -> None:
    assert exit_code_for(StageError("pretrain", NumericalError("nan", timestep=3))) == 4
    assert exit_code_for(StageError("synth", PermissionError("denied"))) == 5
    assert exit_code_for(StageError("measure", ValueError("odd"))) == 3
    assert "Stage 'pretrain' failed" in str(StageError("pretrain", ValueError("x")))


def test_numerical_error_context() -> None:
    err = NumericalError("non-finite loss", timestep=7, condition="1")
    assert str(err) == "non-finite loss (timestep=7, condition=1)"
    assert err.timestep == 7


def test_handle_errors_exits_with_category(capsys: pytest.CaptureFixture) -> None:
    @handle_errors
    def command() -> None:
        raise ConfigError("seed", "must be an integer")

    with pytest.raises(SystemExit) as exit_info:
        command()
    assert exit_info.value.code == 2
    assert "error [config]: Invalid configuration for 'seed'" in capsys.readouterr().err


def test_handle_errors_passes_results_through() -> None:
    assert handle_errors(lambda: 42)() == 42
