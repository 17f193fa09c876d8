import random

import numpy as np
import pytest

from flowrun.sink import (
    AlreadyTaken,
    DataSink,
    Location,
    MatchStatus,
    NotReady,
    SpillCorrupted,
    SpillIOFailure,
    SpillStore,
    StillNeeded,
    UnknownFlow,
    WaitMatchKey,
)
from flowrun.wire import flow_id_for, split_payload

RID = b"r" * 16


def make_sink(**kw):
    clock = {"t": 0.0}
    sink = DataSink("n0", lambda: clock["t"], **kw)
    sink.register_function("merge", ["c0", "c1", "c2", "c3"])
    sink.register_function("count", ["part"])
    sink.register_function("other", ["part"])
    return sink, clock


def feed(sink, fn, data_name, payload, rid=RID, src="src", order=None, now=None):
    fid = flow_id_for(src, data_name, fn)
    chunks = split_payload(rid, fid, payload)
    if order is not None:
        chunks = [chunks[i] for i in order]
    status = None
    for c in chunks:
        status = sink.put(c, fn, data_name, now=now)
    return status


def test_fan_in_ready_only_after_last_input():
    sink, _ = make_sink()
    for i in range(3):
        assert feed(sink, "merge", f"c{i}", b"x" * 1000) is MatchStatus.DATA_COMPLETE
        assert not sink.is_ready(RID, "merge")
    assert feed(sink, "merge", "c3", b"y" * 1000) is MatchStatus.FUNCTION_READY


def test_single_small_chunk_ready_immediately():
    sink, _ = make_sink()
    assert feed(sink, "count", "part", b"hello") is MatchStatus.FUNCTION_READY


def test_duplicates_are_counted_not_stored():
    sink, _ = make_sink()
    payload = bytes(200_000)
    fid = flow_id_for("src", "part", "count")
    chunks = split_payload(RID, fid, payload)
    sink.put(chunks[0], "count", "part")
    assert sink.put(chunks[0], "count", "part") is MatchStatus.PARTIAL
    assert sink.stats.duplicates == 1
    for c in chunks[1:]:
        sink.put(c, "count", "part")
    sink.put(chunks[-1], "count", "part")
    assert sink.stats.duplicates == 2
    assert sink.take(RID, "count", "flu")["part"] == payload


def test_undeclared_data_is_rejected():
    sink, _ = make_sink()
    with pytest.raises(UnknownFlow):
        feed(sink, "count", "nope", b"x")
    with pytest.raises(UnknownFlow):
        feed(sink, "ghost", "part", b"x")


def test_readiness_matches_brute_force():
    rng = random.Random(3)
    for case in range(300):
        sink, _ = make_sink()
        sizes = {f"c{i}": rng.choice([0, 10, 70_000, 200_000]) for i in range(4)}
        chunk_lists = {}
        for name, size in sizes.items():
            fid = flow_id_for("src", name, "merge")
            chunk_lists[name] = split_payload(RID, fid, bytes([ord(name[1])]) * size)
        arrivals = [(n, c) for n, cs in chunk_lists.items() for c in cs]
        arrivals += rng.sample(arrivals, k=min(5, len(arrivals)))   # some duplicates
        rng.shuffle(arrivals)
        arrivals = arrivals[: rng.randrange(len(arrivals) + 1)]
        seen = {n: set() for n in sizes}
        for name, chunk in arrivals:
            sink.put(chunk, "merge", name)
            seen[name].add(chunk.seq)
            oracle = all(seen[n] == set(range(len(chunk_lists[n]))) for n in sizes)
            assert sink.is_ready(RID, "merge") == oracle, case
        if sink.is_ready(RID, "merge"):
            bundle = sink.take(RID, "merge", "flu")
            for n, cs in chunk_lists.items():
                assert bundle[n] == b"".join(c.payload for c in cs)


def test_take_rules():
    sink, _ = make_sink()
    with pytest.raises(NotReady):
        sink.take(RID, "count", "a")
    feed(sink, "count", "part", b"abc" * 40_000)
    assert sink.take(RID, "count", "a") == {"part": b"abc" * 40_000}
    with pytest.raises(AlreadyTaken):
        sink.take(RID, "count", "b")
    assert sink.stats.rejected_takes == 1
    assert sink.stats.duplicate_handoffs == 0


def test_proactive_release_frees_exact_size_and_requires_take():
    sink, clock = make_sink()
    payload = b"z" * 123_456
    feed(sink, "count", "part", payload)
    feed(sink, "other", "part", payload)
    sink.take(RID, "count", "a")
    assert sink.proactive_release(RID, "count", "part") == len(payload)
    with pytest.raises(StillNeeded):
        sink.proactive_release(RID, "other", "part")
    assert sink.stats.resident_bytes == len(payload)


def test_late_duplicate_after_release_is_dropped():
    sink, _ = make_sink()
    feed(sink, "count", "part", b"q" * 10)
    sink.take(RID, "count", "a")
    sink.proactive_release(RID, "count", "part")
    fid = flow_id_for("src", "part", "count")
    assert sink.flow_complete(RID, fid)
    feed(sink, "count", "part", b"q" * 10)
    assert sink.stats.duplicates == 1 and sink.stats.resident_bytes == 0


def test_ttl_spill_and_reload_round_trip(tmp_path):
    for store in (SpillStore(), SpillStore(tmp_path)):
        sink, clock = make_sink(ttl=30, spill=store)
        payload = np.random.default_rng(1).bytes(300_000)
        feed(sink, "count", "part", payload, now=0.0)
        assert sink.expire_sweep(15.0) == []
        key = WaitMatchKey(RID, "count", "part")
        assert sink.expire_sweep(60.0) == [key]
        assert sink.entries[key].location is Location.SPILLED
        assert sink.stats.resident_bytes == 0
        bundle = sink.take(RID, "count", "flu", now=61.0)
        assert bundle["part"] == payload
        assert sink.stats.spill_reloads == 1


def test_spill_layout_on_disk(tmp_path):
    store = SpillStore(tmp_path)
    key = WaitMatchKey(RID, "count", "part")
    store.write(key, b"hello", 0x3610A686)
    assert (tmp_path / "count" / f"{key.digest()}.bin").read_bytes() == b"hello"
    assert store.read(key) == b"hello"
    (tmp_path / "count" / f"{key.digest()}.bin").write_bytes(b"jello")
    with pytest.raises(SpillCorrupted):
        store.read(key)


def test_expire_sweep_selects_exactly_aged_keys():
    sink, _ = make_sink(ttl=30)
    rng = random.Random(5)
    ages = {}
    for i in range(10):
        rid = bytes([i]) * 16
        arrived = rng.uniform(0, 100)
        feed(sink, "count", "part", b"d" * 100, rid=rid, now=arrived)
        ages[WaitMatchKey(rid, "count", "part")] = arrived
    now = 100.0
    aged = sorted(k for k, t in ages.items() if now - t > 30)
    assert sorted(sink.expire_sweep(now)) == aged


def test_spill_failure_keeps_entry_in_memory():
    class Broken(SpillStore):
        def write(self, key, data, crc):
            raise OSError("disk full")

    sink, _ = make_sink(ttl=1, spill=Broken())
    feed(sink, "count", "part", b"k" * 50, now=0.0)
    with pytest.raises(SpillIOFailure) as exc:
        sink.expire_sweep(5.0)
    assert exc.value.failed == [WaitMatchKey(RID, "count", "part")]
    assert sink.entries[WaitMatchKey(RID, "count", "part")].location is Location.MEMORY
    assert sink.stats.resident_bytes == 50


def test_out_of_order_chunks_of_a_spilled_entry():
    sink, _ = make_sink(ttl=1)
    payload = bytes(range(256)) * 1024
    fid = flow_id_for("src", "part", "count")
    chunks = split_payload(RID, fid, payload)
    sink.put(chunks[0], "count", "part", now=0.0)
    sink.expire_sweep(5.0)
    for c in reversed(chunks[1:]):
        sink.put(c, "count", "part", now=6.0)
    assert sink.take(RID, "count", "f", now=7.0)["part"] == payload


def test_byte_seconds_equals_piecewise_integral():
    rng = random.Random(17)
    sink, _ = make_sink()
    t = 0.0
    steps = []      # (time, resident after)
    resident = 0
    live = []
    for i in range(200):
        t += rng.uniform(0, 2)
        if live and rng.random() < 0.4:
            rid, size = live.pop(rng.randrange(len(live)))
            sink.take(rid, "count", "f", now=t)
            sink.proactive_release(rid, "count", "part", now=t)
            resident -= size
        else:
            rid = i.to_bytes(16, "big")
            size = rng.randrange(1, 20_000)
            feed(sink, "count", "part", b"a" * size, rid=rid, now=t)
            live.append((rid, size))
            resident += size
        steps.append((t, resident))
    end = t + 3.0
    times = np.array([s[0] for s in steps] + [end])
    levels = np.array([s[1] for s in steps])
    integral = float(np.sum(levels * np.diff(times)))
    assert sink.settle(end).byte_seconds == pytest.approx(integral, rel=1e-9)


def test_checkpoint_persistence(tmp_path):
    store = SpillStore(tmp_path)
    sink, _ = make_sink(spill=store)
    sink.store_checkpoint(RID, 99, 4, 1.5)
    again = DataSink("n0", spill=SpillStore(tmp_path))
    assert again.load_checkpoint(RID, 99) == (4, 1.5)
    assert again.load_checkpoint(RID, 100) is None
