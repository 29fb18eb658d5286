import pytest
from hypothesis import given, settings

from degas.cfg import NodeKind, build_cfg, count_paths, enumerate_paths, successor, to_dot
from degas.errors import NotOnPath, PathBudgetExceeded
from degas.frontend import Ast, parse, pretty

from test_frontend import programs


def brute_force_paths(cfg):
    """Every entry-to-exit walk, by naive recursion."""
    out = []

    def go(u, trail):
        if u == cfg.exit_id:
            out.append(trail)
        for v in cfg.children[u]:
            go(v, trail + (v,))

    go(cfg.entry_id, (cfg.entry_id,))
    return out


class TestBuild:
    def test_fig2_shape(self, fig2):
        cfg = build_cfg(fig2[0])
        kinds = [n.kind for n in cfg.nodes]
        assert kinds == [NodeKind.ENTRY, NodeKind.RND, NodeKind.TEST, NodeKind.DET, NodeKind.DET, NodeKind.EXIT]
        assert [n.cond for n in cfg.nodes] == [None, None, None, True, False, None]
        assert cfg.children[2] == (3, 4)
        assert cfg.children[3] == cfg.children[4] == (5,)

    def test_skip_program(self):
        cfg = build_cfg(parse("skip;"))
        assert [n.kind for n in cfg.nodes] == [NodeKind.ENTRY, NodeKind.DET, NodeKind.EXIT]
        assert cfg.nodes[0].arg is None

    def test_nested_ifs(self):
        src = "x = gm([1.],[0.],[1.]); if (x > 0) { if (x > 1) { x = 1; } else { x = 2; } } else { x = 3; }"
        cfg = build_cfg(parse(src))
        assert sum(n.kind == NodeKind.TEST for n in cfg.nodes) == 2
        assert count_paths(cfg) == len(brute_force_paths(cfg)) == 3

    def test_two_sequential_ifs(self):
        src = "x = gm([1.],[0.],[1.]); if (x > 0) { x = 1; } else { x = 2; } if (x > 1) { x = 3; }"
        cfg = build_cfg(parse(src))
        assert sum(n.kind == NodeKind.TEST for n in cfg.nodes) == 2
        assert count_paths(cfg) == len(brute_force_paths(cfg)) == 4

    def test_empty_branch_gets_skip(self):
        cfg = build_cfg(parse("x = 1; if (x > 0) { x = 2; }"))
        false_node = [n for n in cfg.nodes if n.cond is False][0]
        assert false_node.kind == NodeKind.DET

    def test_structure_invariants(self):
        cfg = build_cfg(parse("x = gm([1.],[0.],[1.]); if (x > 0) { observe(x < 2); } else { x = 0; } y = x;"))
        for node in cfg.nodes:
            kids = cfg.children[node.id]
            if node.kind == NodeKind.EXIT:
                assert kids == ()
            elif node.kind == NodeKind.TEST:
                assert sorted(cfg.nodes[k].cond for k in kids) == [False, True]
            else:
                assert len(kids) == 1
            for k in kids:
                assert k > node.id


class TestPaths:
    def test_fig2(self, fig2):
        paths = enumerate_paths(build_cfg(fig2[0]))
        assert paths == [(0, 1, 2, 3, 5), (0, 1, 2, 4, 5)]

    def test_straight_line(self):
        assert len(enumerate_paths(build_cfg(parse("x = 1; y = x;")))) == 1

    @pytest.mark.parametrize("k", range(1, 7))
    def test_sequential_ifs(self, k):
        src = "x = gm([1.],[0.],[1.]);" + "if (x > 0) { x = x + 1; } else { skip; }" * k
        cfg = build_cfg(parse(src))
        assert len(enumerate_paths(cfg)) == 2**k == len(brute_force_paths(cfg))

    def test_budget(self):
        src = "x = gm([1.],[0.],[1.]);" + "if (x > 0) { skip; }" * 5
        with pytest.raises(PathBudgetExceeded) as info:
            enumerate_paths(build_cfg(parse(src)), max_paths=16)
        assert info.value.count == 32

    def test_true_branch_first(self):
        cfg = build_cfg(parse("x = 1; if (x > 0) { x = 2; } else { x = 3; } if (x > 2) { skip; }"))
        first, second = enumerate_paths(cfg)[:2]
        assert cfg.nodes[first[3]].cond is True and cfg.nodes[second[3]].cond is True

    @settings(max_examples=100, deadline=None)
    @given(programs())
    def test_paths_cover_edges(self, body):
        cfg = build_cfg(parse(pretty(Ast((), body))))
        paths = enumerate_paths(cfg)
        assert sorted(paths) == sorted(brute_force_paths(cfg))
        assert len(paths) == count_paths(cfg)
        tests = {n.id for n in cfg.nodes if n.kind == NodeKind.TEST}
        covered = set()
        for p in paths:
            assert all(p.count(t) <= 1 for t in tests)
            assert len(p) == len(set(p))
            covered |= set(zip(p, p[1:]))
        assert covered == cfg.edges()
        assert enumerate_paths(cfg) == paths


class TestSuccessor:
    def test_fig2(self, fig2):
        true_path = enumerate_paths(build_cfg(fig2[0]))[0]
        assert successor(true_path, 2) == 3
        assert successor(true_path, 0) == 1
        assert successor(true_path, 3) == 5

    def test_errors(self, fig2):
        true_path = enumerate_paths(build_cfg(fig2[0]))[0]
        with pytest.raises(NotOnPath):
            successor(true_path, 4)
        with pytest.raises(NotOnPath):
            successor(true_path, 5)


class TestDot:
    def test_labels_and_edges(self, fig2):
        dot = to_dot(build_cfg(fig2[0]))
        assert dot.startswith("digraph cfg {")
        assert 'n2 -> n3 [label="true"]' in dot
        assert 'n2 -> n4 [label="false"]' in dot
        assert "x < _theta" in dot
