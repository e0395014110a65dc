from queryfuse import geometry as geo, verify
from queryfuse.numerics import make_rng


def test_failure_reports_first_bad_seed():
    res = verify._run("m", "p", 10, 100, lambda rng: "bad" if rng.random() < 2 else None)
    assert not res.passed and res.seed == 100 and res.trials == 1
    assert res.line().startswith("FAIL m: p") and "seed=100: bad" in res.line()


def test_seeds_replay():
    seen = []
    verify._run("m", "p", 3, 7, lambda rng: seen.append(rng.random()))
    assert seen == [make_rng(s).random() for s in (7, 8, 9)]


def test_pass_line():
    res = verify._run("m", "p", 4, 0, lambda rng: None)
    assert res.passed and res.line().startswith("PASS m: p (4 trials")


def test_mc_iou_against_known_overlap():
    a = geo.BBox3D([0, 0, 0], [1, 1, 1])
    b = geo.BBox3D([0.5, 0, 0], [1, 1, 1])
    assert abs(verify.mc_iou(a, b, make_rng(0)) - 1 / 3) < 5e-3


def test_oracle_masks_small_case():
    valid = [True, True, False]
    c = [[0, 0, 0], [4, 0, 0], [0, 0, 0]]
    s = [[0.9], [0.1], [0.9]]
    q, p, sm, comb = verify.oracle_masks(valid, c, s, 3.0, 0.2)
    assert q.tolist() == [[False, False, True], [False, False, True], [True, True, True]]
    assert p[0, 1] and not p[0, 2]
    assert sm[1].all() and not sm[0, 2]
    assert not comb.diagonal().any() and comb[0, 1] and comb[0, 2]


def test_suite_names_are_unique():
    names = [n for n, _ in verify.suite()]
    assert len(names) == len(set(names)) == 10


def test_quick_run_of_cheap_suites():
    for name in ("masks", "hungarian", "bandwidth", "unmasked"):
        results = verify.run_all(quick=True, only=name)
        assert results and all(r.passed for r in results), [r.line() for r in results]
