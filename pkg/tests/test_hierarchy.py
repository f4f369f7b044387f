import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hieract.errors import (
    CycleDetected,
    DeadInternalNode,
    DepthExceeded,
    DuplicateName,
    EmptyLevel,
    LeafHasNoChildren,
    OrphanNode,
)
from hieract.hierarchy import (
    LabelNode,
    balance_metrics,
    build_hierarchy,
    hierarchy_from_dict,
    leaf_paths,
    load_hierarchy,
    loads_hierarchy,
    save_hierarchy,
    sub_labels,
)

from conftest import random_hierarchy, tree_from_children


class TestBuild:
    def test_s3dis_level_sizes(self, s3dis):
        assert s3dis.level_sizes == (3, 6, 13)
        assert s3dis.num_levels == 3

    def test_single_root_declared_two_levels(self):
        with pytest.raises(EmptyLevel):
            build_hierarchy([LabelNode(0, "root", 0)], num_levels=2)

    def test_parent_on_same_level_is_orphan(self):
        nodes = [LabelNode(0, "a", 0), LabelNode(1, "b", 1, 0), LabelNode(2, "c", 1, 1)]
        with pytest.raises(OrphanNode):
            build_hierarchy(nodes)

    def test_missing_parent_is_orphan(self):
        with pytest.raises(OrphanNode):
            build_hierarchy([LabelNode(0, "a", 0), LabelNode(1, "b", 1, 7)])

    def test_cycle(self):
        nodes = [LabelNode(0, "a", 0), LabelNode(1, "b", 1, 2), LabelNode(2, "c", 1, 1)]
        with pytest.raises(CycleDetected):
            build_hierarchy(nodes)

    def test_duplicate_name_within_level(self):
        nodes = [LabelNode(0, "a", 0), LabelNode(1, "x", 1, 0), LabelNode(2, "x", 1, 0)]
        with pytest.raises(DuplicateName):
            build_hierarchy(nodes)

    def test_same_name_on_different_levels_is_allowed(self):
        h = build_hierarchy([LabelNode(0, "column", 0), LabelNode(1, "column", 1, 0)])
        assert h.level_sizes == (1, 1)

    def test_dead_internal_node(self):
        nodes = [LabelNode(0, "a", 0), LabelNode(1, "b", 0), LabelNode(2, "a1", 1, 0)]
        with pytest.raises(DeadInternalNode):
            build_hierarchy(nodes)

    def test_depth_limit(self):
        nodes = [LabelNode(i, f"n{i}", i, i - 1 if i else None) for i in range(9)]
        with pytest.raises(DepthExceeded):
            build_hierarchy(nodes)
        assert build_hierarchy(nodes[:8]).num_levels == 8

    def test_empty(self):
        with pytest.raises(EmptyLevel):
            build_hierarchy([])

    def test_arrays_are_read_only(self, s3dis):
        with pytest.raises(ValueError):
            s3dis.path_table[0, 0] = 5


class TestQueries:
    def test_sub_labels_direct_edges(self):
        h = tree_from_children({"furniture": ["chair", "table", "sofa"]}, ["furniture"])
        root = h.find("furniture").id
        assert [h.node(i).name for i in sub_labels(h, root)] == ["chair", "table", "sofa"]

    def test_sub_labels_of_leaf(self, small_tree):
        with pytest.raises(LeafHasNoChildren):
            sub_labels(small_tree, small_tree.find("A1").id)

    def test_chain_has_singleton_children(self):
        h = tree_from_children({"a": ["b"], "b": ["c"], "c": ["d"]}, ["a"])
        for lvl in range(3):
            assert len(sub_labels(h, h.levels[lvl][0])) == 1

    def test_leaf_paths_two_levels(self, small_tree):
        names = [[small_tree.node(i).name for i in p.node_ids] for p in leaf_paths(small_tree)]
        assert names == [["A", "A1"], ["A", "A2"], ["B", "B1"]]

    def test_leaf_paths_s3dis(self, s3dis):
        paths = leaf_paths(s3dis)
        assert len(paths) == 13
        assert all(len(p.node_ids) == 3 for p in paths)
        chair = next(p for p in paths if s3dis.node(p.leaf_id).name == "chair")
        assert [s3dis.node(i).name for i in chair.node_ids] == ["furniture", "seating", "chair"]

    def test_leaf_paths_chain(self):
        h = tree_from_children({"a": ["b"], "b": ["c"], "c": ["d"]}, ["a"])
        paths = leaf_paths(h)
        assert len(paths) == 1 and len(paths[0].node_ids) == 4

    def test_path_table_matches_positions(self, s3dis):
        for row, p in zip(s3dis.path_table, leaf_paths(s3dis)):
            assert list(row) == [s3dis.position(i) for i in p.node_ids]


class TestBalance:
    def test_s3dis(self, s3dis):
        rep = balance_metrics(s3dis)
        assert rep.level_sizes == (3, 6, 13)
        assert rep.depth == 3
        assert rep.per_level[0].mean_children == pytest.approx(2.0)
        assert rep.per_level[1].mean_children == pytest.approx(13 / 6)
        assert (rep.per_level[0].min_children, rep.per_level[0].max_children) == (1, 3)

    def test_binary(self):
        h = tree_from_children({"r": ["a", "b"], "a": ["a1", "a2"], "b": ["b1", "b2"]}, ["r"])
        rep = balance_metrics(h)
        assert set(rep.child_counts.values()) == {2}

    def test_chain(self):
        h = tree_from_children({"a": ["b"], "b": ["c"]}, ["a"])
        assert set(balance_metrics(h).child_counts.values()) == {1}


class TestFileFormat:
    def test_round_trip_s3dis(self, s3dis, tmp_path):
        path = tmp_path / "h.json"
        save_hierarchy(s3dis, path)
        doc = json.loads(path.read_text())
        assert load_hierarchy(path).to_dict() == doc
        assert load_hierarchy(path) == s3dis

    def test_cycle_names_node(self):
        doc = {"levels": [["r"], ["a", "b"]], "parents": {"a": "b", "b": "a"}}
        with pytest.raises(CycleDetected, match="'a'|'b'"):
            hierarchy_from_dict(doc)

    def test_unknown_parent(self):
        with pytest.raises(OrphanNode):
            hierarchy_from_dict({"levels": [["r"], ["a"]], "parents": {"a": "zzz"}})

    def test_names_must_be_globally_unique(self):
        with pytest.raises(DuplicateName):
            hierarchy_from_dict({"levels": [["x"], ["x"]], "parents": {"x": "x"}})

    def test_utf8_names(self):
        text = json.dumps({"levels": [["mobilier"], ["chaise", "étagère"]],
                           "parents": {"chaise": "mobilier", "étagère": "mobilier"}},
                          ensure_ascii=False).encode("utf-8")
        h = loads_hierarchy(text)
        assert h.level_names(1) == ["chaise", "étagère"]

    def test_parent_order_irrelevant(self, s3dis):
        doc = s3dis.to_dict()
        doc["parents"] = dict(reversed(list(doc["parents"].items())))
        assert hierarchy_from_dict(doc) == s3dis


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_structural_properties(seed):
    h = random_hierarchy(np.random.default_rng(seed))
    # round trip
    assert hierarchy_from_dict(h.to_dict()).to_dict() == h.to_dict()
    # path entry i is the unique ancestor at level i
    for p in h.leaf_paths():
        for lvl, nid in enumerate(p.node_ids):
            assert h.node(nid).level == lvl
            assert h.ancestor_at(p.leaf_id, lvl) == nid
    # sub_labels agrees with parent ids, and children of level i partition level i+1
    for lvl in range(h.num_levels - 1):
        covered = []
        for nid in h.levels[lvl]:
            kids = h.sub_labels(nid)
            assert all(h.node(k).parent_id == nid for k in kids)
            covered += kids
        assert sorted(covered) == sorted(h.levels[lvl + 1])
