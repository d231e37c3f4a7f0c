"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py``; the summary block at the
end of the run lists every criterion in order.
"""

import math
import random
import time

import numpy as np
from scipy import stats

from silotrace import aggregation as agg
from silotrace import parties as P
from silotrace.convert import place_id
from silotrace.granularity import PlaceTree, UnitizationConfig, expand, unitize
from silotrace.psi import PsiMode, run_psi
from silotrace.simnet import build_world, bundled_scenarios, parse_scenario, run_scenario, run_world
from silotrace.unified_format import (
    MINUTES_PER_DAY,
    ContactRecord,
    GeneratedIdentifier,
    PlaceStructure,
    SubjectRef,
    VisitRecord,
    make_opaque_id,
    references,
)

import world_oracle
from test_granularity import dfs_leaves, minute_segments, node, random_forest

RETENTION = 14 * MINUTES_PER_DAY


# -- 1. PSI ------------------------------------------------------------------------------------


def psi_trials(n_trials=1000, max_size=512, seed=2024):
    """Yield ``(receiver, sender, mode)``.

    Sizes are log-uniform on [1, max_size] so every order of magnitude is
    exercised; the full 512x512 corners at 0% and 100% overlap run in both
    modes.  Modes alternate over the remaining trials.
    """
    rng = np.random.default_rng(seed)

    def fresh(k):
        buf = rng.bytes(32 * k)
        return [buf[i * 32:(i + 1) * 32] for i in range(k)]

    corners = []
    for frac in (0.0, 1.0):
        base = fresh(max_size)
        other = base if frac else fresh(max_size)
        for mode in PsiMode:
            corners.append((base, list(reversed(other)), mode))
    yield from corners
    for t in range(n_trials - len(corners)):
        a = int(round(math.exp(rng.uniform(0, math.log(max_size)))))
        b = int(round(math.exp(rng.uniform(0, math.log(max_size)))))
        overlap = int(rng.integers(0, min(a, b) + 1))
        recv = fresh(a)
        send = recv[:overlap] + fresh(b - overlap)
        rng.shuffle(send)
        yield recv, send, PsiMode.PSI if t % 2 == 0 else PsiMode.PSI_CA


def test_criterion_1_psi_oracle(criterion):
    with criterion(1, "PSI oracle equivalence") as c:
        t0 = time.perf_counter()
        wrong = trials = 0
        modes = {m: 0 for m in PsiMode}
        for i, (recv, send, mode) in enumerate(psi_trials()):
            want = set(recv) & set(send)
            res = run_psi(recv, send, mode, seed=i)
            if mode is PsiMode.PSI:
                wrong += res.elements != want
            else:
                wrong += res.count != len(want)
            trials += 1
            modes[mode] += 1
        elapsed = time.perf_counter() - t0
        c.ok = trials == 1000 and wrong == 0 and elapsed < 60
        c.detail = (f"{trials} trials (psi {modes[PsiMode.PSI]}, psi-ca {modes[PsiMode.PSI_CA]}), "
                    f"{wrong} wrong, {elapsed:.1f}s")
    assert c.ok, c.detail


# -- 2. secure sum ----------------------------------------------------------------------------


def test_criterion_2_secure_sum(criterion):
    with criterion(2, "secure-sum oracle equivalence") as c:
        rng = np.random.default_rng(77)
        wrong = 0
        for _ in range(200):
            n = int(rng.integers(3, 101))
            ell = int(rng.integers(1, 10_001))
            mat = rng.integers(0, 50, size=(n, ell))
            s1, s2 = [], []
            for row in mat:
                a, b = agg.share_vector(agg.VisitVector(row.astype(np.uint64)), rng)
                s1.append(a)
                s2.append(b)
            totals = agg.combine(agg.aggregate(s1), agg.aggregate(s2))
            wrong += not np.array_equal(totals.astype(np.int64), mat.sum(axis=0))
        share, _ = agg.share_vector(agg.VisitVector(np.full(1_000_000, 3, dtype=np.uint64)), 78)
        counts = np.bincount((share.values & np.uint64(0xFF)).astype(np.int64), minlength=256)
        p = stats.chisquare(counts).pvalue
        c.ok = wrong == 0 and p > 0.01
        c.detail = f"200 trials, {wrong} wrong; chi-square p={p:.3f}"
    assert c.ok, c.detail


# -- 3. LDP -----------------------------------------------------------------------------------


def test_criterion_3_ldp(criterion):
    with criterion(3, "LDP heavy hitters") as c:
        eps, n, ell, hot, freq = math.log(3), 10_000, 16, 5, 1000
        bits = np.zeros((n, ell), dtype=np.uint8)
        bits[:freq, hot] = 1
        se = agg.ldp_std_error(n, eps)
        inside = 0
        for run in range(100):
            rng = np.random.default_rng(3000 + run)
            est = agg.ldp_estimate(agg.ldp_report_batch(bits, eps, rng), eps)
            inside += abs(est[hot] - freq) <= 3 * se
        exact = all(
            np.array_equal(np.rint(agg.ldp_estimate(agg.ldp_report_batch(bits, e, np.random.default_rng(9)), e)),
                           bits.sum(axis=0))
            for e in (60.0, math.inf)
        )
        c.ok = inside >= 99 and exact
        c.detail = f"{inside}/100 within 3se (se={se:.1f}); large-epsilon exact={exact}"
    assert c.ok, c.detail


# -- 4. granularity ---------------------------------------------------------------------------


def test_criterion_4_granularity(criterion):
    with criterion(4, "granularity") as c:
        who = SubjectRef.individual(make_opaque_id(bytes(16), "name", "x"))
        at = SubjectRef.place(node(0))
        cfg = UnitizationConfig(15)
        hour = len(unitize(VisitRecord(who, at, 720, 780), cfg))
        day = len(unitize(VisitRecord(who, at, 0, MINUTES_PER_DAY), cfg))

        rnd = random.Random(404)
        bad_intervals = 0
        for _ in range(500):
            seg = rnd.choice([1, 5, 10, 15, 30, 60, 120])
            s = rnd.randrange(0, 5 * MINUTES_PER_DAY)
            e = s + rnd.choice([0, rnd.randrange(1, 90), rnd.randrange(1, 2 * MINUTES_PER_DAY)])
            out = unitize(VisitRecord(who, at, s, e), UnitizationConfig(seg))
            got = [o.day * (MINUTES_PER_DAY // seg) + o.segment for o in out]
            bad_intervals += sorted(got) != sorted(minute_segments(s, e, seg)) or len(got) != len(set(got))

        bad_forests = 0
        for seed in range(500):
            r = random.Random(seed)
            size = r.randint(1, 30)
            parent, children = random_forest(r, size)
            t = PlaceTree()
            for ch, pa in parent.items():
                t.add(PlaceStructure(node(ch), node(pa)))
            for i in range(size):
                got = [v.place.digest for v in expand(VisitRecord(who, SubjectRef.place(node(i)), 0, 1), t)]
                want = {node(x).digest for x in dfs_leaves(children, i)}
                if set(got) != want or len(got) != len(want):
                    bad_forests += 1
                    break
        c.ok = hour == 4 and day == 96 and bad_intervals == 0 and bad_forests == 0
        c.detail = f"1h={hour} 24h={day}; intervals wrong {bad_intervals}/500; forests wrong {bad_forests}/500"
    assert c.ok, c.detail


# -- 5, 6. worked scenarios --------------------------------------------------------------------


def test_criterion_5_alice_taxi(criterion):
    with criterion(5, "alice_taxi") as c:
        res = run_scenario("alice_taxi")
        w = res.world
        car = place_id(w.config.salt, "plate-7").digest
        contaminated = car in w.businesses["rideco"].contaminated and car in w.ma.places
        notes = w.users["alice"].notifications
        indirect = [n for n in notes if n.cause is P.NotificationCause.INDIRECT_CONTACT_PLACE]
        c.ok = res.exit_status == 0 and w.cycle == 1 and contaminated and len(notes) == 1 and len(indirect) == 1
        c.detail = f"cycles={w.cycle} car contaminated={contaminated} alice notifications={len(notes)}"
    assert c.ok, c.detail


def test_criterion_6_alice_restaurant(criterion):
    with criterion(6, "alice_restaurant") as c:
        res = run_scenario("alice_restaurant")
        w = res.world
        alice_ids = set(w.users["alice"].identity.ids)
        # the restaurant's full message log: bus envelopes plus logged message events
        blobs = [env.payload for env in w.bus.traffic("noodleco")]
        blobs += [str(e).encode() for e in w.log.events
                  if "noodleco" in (e["actor"], e["payload"].get("to"))]
        leaks = sum(d in blob or d.hex().encode() in blob for d in alice_ids for blob in blobs)
        queried = [e for e in w.log.of_kind("notification") if e["actor"] == "alice"]
        rotated = [e for e in w.log.of_kind("place_contaminated")
                   if e["actor"] == "noodleco" and e["payload"]["via"] == "staff-rotation"]
        c.ok = res.exit_status == 0 and bool(queried) and leaks == 0 and bool(rotated) and len(blobs) > 0
        c.detail = (f"alice notified={bool(queried)}; {leaks} alice ids in {len(blobs)} restaurant messages; "
                    f"staff-rotation places={len(rotated)}")
    assert c.ok, c.detail


# -- 7. closed loop ----------------------------------------------------------------------------


def test_criterion_7_closed_loop(criterion):
    with criterion(7, "closed-loop soundness/completeness") as c:
        total_cycles, bad_worlds = 0, []
        for seed in range(50):
            cycles, bad = world_oracle.compare(seed, max_users=20, max_businesses=5, max_records=200)
            total_cycles += cycles
            if bad:
                bad_worlds.append((seed, bad[0]))
        c.ok = not bad_worlds and total_cycles >= 50
        c.detail = f"50 worlds, {total_cycles} cycles compared, {len(bad_worlds)} mismatching worlds"
        if bad_worlds:
            c.detail += f"; first: {bad_worlds[0]}"
    assert c.ok, c.detail


# -- 8. retention / forgetting ------------------------------------------------------------------


def _keep(o, now):
    if isinstance(o, GeneratedIdentifier):
        return o.expires_at > now and now - o.created_at <= RETENTION
    if isinstance(o, (VisitRecord, ContactRecord)):
        return now - o.end <= RETENTION
    return True


def _random_world(seed):
    scenario = world_oracle.generate(seed, max_users=12, max_businesses=4, max_records=120)
    parsed = parse_scenario(scenario, name=scenario["name"])
    world = build_world(parsed)
    run_world(world, parsed.timeline)
    return world


def _parties(w):
    return list(w.users.values()) + list(w.businesses.values())


def test_criterion_8_retention_and_forgetting(criterion):
    with criterion(8, "retention and forgetting") as c:
        violators = overreach = 0
        for seed in range(20):
            w = _random_world(seed)
            rnd = random.Random(seed)
            now = w.now + rnd.randrange(0, 20 * MINUTES_PER_DAY)
            for party in _parties(w):
                before = list(party.store.objects())
                P.expire_records(party, now, RETENTION)
                after = list(party.store.objects())
                violators += sum(not _keep(o, now) for o in after)
                overreach += after != [o for o in before if _keep(o, now)]
                if isinstance(party, P.UserState):
                    violators += sum(not _keep(g, now) for g in party.emitted)

        residue = 0
        for seed in range(20):
            w = _random_world(100 + seed)
            victim = random.Random(seed).choice(sorted(w.users))
            for d in w.users[victim].identity.ids:
                for party in _parties(w) + [w.ma]:
                    P.forget(party, d)
                for party in _parties(w):
                    residue += sum(d in references(o) for o in party.store.objects())
                    if isinstance(party, P.BusinessState):
                        residue += sum(d in coll for coll in (party.consent, party.channels, party.matched_customers,
                                                              party.exposed, party.staff))
                    else:
                        residue += sum(g.digest == d for g in party.emitted)
                residue += d in w.ma.starting_points

        res = run_scenario("decontamination")
        events = res.world.log.events
        cleared = [i for i, e in enumerate(events)
                   if e["event_kind"] == "maintenance" and e["payload"].get("decontaminated")]
        late = [e for e in events[cleared[0]:] if e["event_kind"] == "notification"] if cleared else [None]
        zoe = bool(res.world.users["zoe"].notifications)
        c.ok = violators == 0 and overreach == 0 and residue == 0 and cleared and not late and not zoe
        c.detail = (f"expire violators={violators} over-deletions={overreach}; forget residue={residue}; "
                    f"decontaminated={bool(cleared)} later notifications={len(late)} zoe notified={zoe}")
    assert c.ok, c.detail


# -- 9. determinism -----------------------------------------------------------------------------


def test_criterion_9_determinism(criterion, tmp_path):
    with criterion(9, "determinism") as c:
        differ = []
        names = sorted(bundled_scenarios())
        for name in names:
            outs = []
            for k in range(2):
                d = tmp_path / f"{name}-{k}"
                res = run_scenario(name, out_dir=d)
                outs.append(((d / "events.jsonl").read_bytes(), (d / "heatmap.csv").read_bytes(), res.exit_status))
            if outs[0] != outs[1] or outs[0][2] != 0:
                differ.append(name)
        c.ok = not differ and len(names) >= 5
        c.detail = f"{len(names)} bundled scenarios, {len(differ)} differing {differ or ''}".strip()
    assert c.ok, c.detail
