import pickle

import pytest

from errors import ConfigError, GraphFormatError, InvalidArgument, MazeParseError


@pytest.mark.parametrize(
    "exc, attrs",
    [
        (GraphFormatError("bad magic", 0), {"offset": 0}),
        (MazeParseError("unknown character 'x'", 2, 5), {"line": 2, "column": 5}),
        (ConfigError("must be >= 0", field="reward.beta"), {"field": "reward.beta"}),
        (InvalidArgument("k must be positive", field="k"), {"field": "k"}),
    ],
)
def test_errors_survive_pickling(exc, attrs):
    # seeds run in worker processes and their errors come back pickled
    restored = pickle.loads(pickle.dumps(exc))
    assert type(restored) is type(exc)
    assert str(restored) == str(exc)
    for name, value in attrs.items():
        assert getattr(restored, name) == value


def test_position_is_optional():
    assert str(GraphFormatError("truncated")) == "truncated"
    assert str(MazeParseError("empty maze")) == "empty maze"
