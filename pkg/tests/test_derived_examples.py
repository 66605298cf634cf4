import pytest

from derived_examples import EXAMPLES


@pytest.mark.parametrize("name", sorted(EXAMPLES))
def test_derived_example(name):
    ok, detail = EXAMPLES[name]()
    assert ok, detail
