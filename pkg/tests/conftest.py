import pytest

from edgetms.core import NodeId


@pytest.fixture
def node() -> NodeId:
    return NodeId.from_int(0x1234)


@pytest.fixture
def other_node() -> NodeId:
    return NodeId.from_int(0xBEEF)
