import itertools
import re
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgetms.bus import Bus, BusClosed, InvalidFilter, TopicFilter, topic_matches


def regex_oracle(filter_text: str, topic: str) -> bool:
    """Independent matcher: translate the filter to a regular expression."""
    segs = filter_text.split("/")
    if topic.startswith("$") and segs[0] in ("+", "#"):
        return False
    parts = []
    for i, s in enumerate(segs):
        if s == "#":
            # '#' also matches the parent level itself
            pattern = "/".join(parts)
            pattern = (pattern + "(/.*)?") if parts else ".*"
            return re.fullmatch(pattern, topic) is not None
        parts.append("[^/]*" if s == "+" else re.escape(s))
    return re.fullmatch("/".join(parts), topic) is not None


def test_basic_matching():
    assert topic_matches("tms/+/n1/inference", "tms/siteA/n1/inference")
    assert topic_matches("tms/#", "tms")
    assert topic_matches("tms/#", "tms/a/b/c")
    assert not topic_matches("tms/#", "other/x")
    assert not topic_matches("tms/+", "tms/a/b")
    assert not topic_matches("#", "$SYS/x")
    assert not topic_matches("+/x", "$SYS/x")
    assert topic_matches("$SYS/#", "$SYS/x")
    assert topic_matches("tms/#", "tms/$alarms")


@pytest.mark.parametrize("bad", ["", "a/#/b", "a/b#", "a/+b", "a//b"])
def test_invalid_filters(bad):
    with pytest.raises(InvalidFilter):
        TopicFilter.parse(bad)


def _all_levels(max_levels, alphabet):
    for n in range(1, max_levels + 1):
        yield from itertools.product(alphabet, repeat=n)


def test_exhaustive_small_alphabet_against_regex_oracle():
    topics = ["/".join(t) for t in _all_levels(4, "ab")]
    filters = []
    for f in _all_levels(4, ["a", "b", "+", "#"]):
        if "#" in f[:-1]:
            continue
        filters.append("/".join(f))
    checked = 0
    for f in filters:
        tf = TopicFilter.parse(f)
        for t in topics:
            assert topic_matches(tf, t) == regex_oracle(f, t), (f, t)
            checked += 1
    assert (len(filters), len(topics), checked) == (160, 30, 4800)


@given(st.lists(st.sampled_from(["a", "b", "$s", "+", "#"]), min_size=1, max_size=5),
       st.lists(st.sampled_from(["a", "b", "$s", "c"]), min_size=1, max_size=5))
def test_matcher_agrees_with_oracle_random(fsegs, tsegs):
    if "#" in fsegs[:-1]:
        return
    f, t = "/".join(fsegs), "/".join(tsegs)
    assert topic_matches(f, t) == regex_oracle(f, t)


def test_publish_without_subscribers():
    assert Bus().publish("tms/a", b"x") == 0


def test_overlapping_subscriptions_each_get_a_copy():
    bus = Bus()
    s1 = bus.subscribe("tms/#")
    s2 = bus.subscribe("tms/+/n1/inference")
    assert bus.publish("tms/siteA/n1/inference", b"p") == 2
    assert s1.drain() == [("tms/siteA/n1/inference", b"p")]
    assert s2.drain() == [("tms/siteA/n1/inference", b"p")]
    assert bus.publish("tms/siteA/n2/inference", b"q") == 1


def test_no_retained_messages_and_unsubscribe():
    bus = Bus()
    bus.publish("tms/a", b"early")
    sub = bus.subscribe("tms/#")
    assert sub.get(timeout=0) is None
    bus.publish("tms/a", b"1")
    sub.unsubscribe()
    bus.publish("tms/a", b"2")
    assert sub.drain() == [("tms/a", b"1")]
    assert list(sub) == []


def test_publish_topic_must_be_concrete():
    bus = Bus()
    with pytest.raises(ValueError):
        bus.publish("tms/+", b"")
    with pytest.raises(ValueError):
        bus.publish("", b"")


def test_closed_bus_rejects_publish_and_ends_iteration():
    bus = Bus()
    sub = bus.subscribe("#")
    bus.publish("x", b"1")
    bus.close()
    with pytest.raises(BusClosed):
        bus.publish("x", b"2")
    with pytest.raises(BusClosed):
        bus.subscribe("#")
    assert list(sub) == [("x", b"1")]


def test_concurrent_publishers_preserve_per_publisher_order():
    bus = Bus()
    sub = bus.subscribe("tms/#")
    n_pub, n_msg = 10, 1000

    def run(p):
        for i in range(n_msg):
            bus.publish(f"tms/p{p}", f"{p}:{i}".encode())

    threads = [threading.Thread(target=run, args=(p,)) for p in range(n_pub)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = sub.drain()
    assert len(got) == n_pub * n_msg
    last = {}
    for _, payload in got:
        p, i = map(int, payload.decode().split(":"))
        assert i == last.get(p, -1) + 1
        last[p] = i
