import json

import numpy as np
import pytest

from sparse_ct_lab.study import (Annotation, DuplicateAnnotation,
                                 STUDY_VIEW_LEVELS, StudyError, StudyStore,
                                 StudySubject, ValidationError, analyze,
                                 build_presentation_set, reorder_items)

SIZE = 16


def make_subjects(n_diseased, n_healthy=0):
    subjects = []
    for i in range(n_diseased + n_healthy):
        diseased = i < n_diseased
        mask = None
        if diseased:
            mask = np.zeros((SIZE, SIZE), dtype=bool)
            mask[4 + i % 4:7 + i % 4, 5:8] = True
        renditions = {(v, var): f"images/s{i:03d}_{v}_{var}.raw"
                      for v in STUDY_VIEW_LEVELS for var in ("sparse", "processed")}
        subjects.append(StudySubject(subject_id=f"s{i:03d}", renditions=renditions,
                                     size=SIZE, diseased=diseased, truth_mask=mask))
    return subjects


def fresh_store(tmp_path, subjects, readers=("r1", "r2", "r3"), seed=7):
    store = StudyStore.create(tmp_path / "store.jsonl")
    items = build_presentation_set(subjects, seed=seed)
    store.add_items(items)
    for s in subjects:
        store.add_truth(s.subject_id, s.diseased, s.truth_mask)
    for k, reader in enumerate(readers):
        store.add_reader(reader, token=f"token-{reader}-0123456789abcdef",
                         order=reorder_items(items, seed=seed + 100 + k))
    return store, items


# ---------------------------------------------------------------------------
# build_presentation_set


def test_19_subjects_gives_190_items():
    items = build_presentation_set(make_subjects(12, 7), seed=1)
    assert len(items) == 190


def test_single_subject_gives_10_items():
    items = build_presentation_set(make_subjects(1), seed=1)
    assert len(items) == 10
    combos = {(i.views, i.variant) for i in items}
    assert len(combos) == 10


def test_same_seed_same_output_different_seed_same_triples():
    subjects = make_subjects(3, 1)
    a = build_presentation_set(subjects, seed=5)
    b = build_presentation_set(subjects, seed=5)
    c = build_presentation_set(subjects, seed=6)
    assert [i.item_id for i in a] == [i.item_id for i in b]
    assert [(i.subject_id, i.views, i.variant) for i in a] \
        == [(i.subject_id, i.views, i.variant) for i in b]
    triples = lambda items: {(i.subject_id, i.views, i.variant) for i in items}
    assert triples(a) == triples(c)
    assert [(i.subject_id, i.views, i.variant) for i in a] \
        != [(i.subject_id, i.views, i.variant) for i in c]


def test_missing_rendition_errors():
    subjects = make_subjects(1)
    subjects[0].renditions.pop((64, "processed"))
    with pytest.raises(StudyError):
        build_presentation_set(subjects, seed=1)


def test_item_ids_are_opaque():
    items = build_presentation_set(make_subjects(2, 1), seed=3)
    for item in items:
        assert str(item.views) not in item.item_id or len(item.item_id) == 32
        for token in ("sparse", "processed", "view"):
            assert token not in item.item_id


def test_512_level_excluded():
    items = build_presentation_set(make_subjects(1), seed=1)
    assert {i.views for i in items} == set(STUDY_VIEW_LEVELS)
    assert 512 not in {i.views for i in items}


# ---------------------------------------------------------------------------
# store + record_annotation


def make_annotation(reader, item, quality=4, confidence=4, artifacts=2,
                    mask=None):
    if mask is None:
        mask = np.zeros((SIZE, SIZE), dtype=bool)
    return Annotation(reader_id=reader, item_id=item.item_id, quality=quality,
                      confidence=confidence, artifacts=artifacts, mask=mask)


def test_out_of_range_scores_rejected(tmp_path):
    store, items = fresh_store(tmp_path, make_subjects(1), readers=("r1",))
    with pytest.raises(ValidationError):
        make_annotation("r1", items[0], quality=7)
    with pytest.raises(ValidationError):
        make_annotation("r1", items[0], artifacts=5)
    with pytest.raises(ValidationError):
        make_annotation("r1", items[0], confidence=0)


def test_duplicate_annotation_conflicts(tmp_path):
    store, items = fresh_store(tmp_path, make_subjects(1), readers=("r1",))
    store.record_annotation(make_annotation("r1", items[0]))
    with pytest.raises(DuplicateAnnotation):
        store.record_annotation(make_annotation("r1", items[0]))


def test_mask_shape_must_match_item(tmp_path):
    store, items = fresh_store(tmp_path, make_subjects(1), readers=("r1",))
    with pytest.raises(ValidationError):
        store.record_annotation(
            make_annotation("r1", items[0], mask=np.zeros((8, 8), dtype=bool)))


def test_replay_reproduces_index(tmp_path):
    store, items = fresh_store(tmp_path, make_subjects(2, 1))
    mask = np.zeros((SIZE, SIZE), dtype=bool)
    mask[3:6, 3:6] = True
    store.record_annotation(make_annotation("r1", items[0], mask=mask))
    store.record_annotation(make_annotation("r2", items[1]))
    store.close()

    replayed = StudyStore.open(tmp_path / "store.jsonl")
    assert set(replayed.items) == set(store.items)
    assert set(replayed.annotations) == set(store.annotations)
    ann = replayed.annotations[("r1", items[0].item_id)]
    assert np.array_equal(ann.mask, mask)
    assert replayed.readers["r3"]["order"] == store.readers["r3"]["order"]


def test_crash_replay_drops_partial_tail(tmp_path):
    store, items = fresh_store(tmp_path, make_subjects(1), readers=("r1",))
    store.record_annotation(make_annotation("r1", items[0]))
    store.close()
    path = tmp_path / "store.jsonl"
    raw = path.read_bytes()
    # simulate a crash mid-append of a second annotation
    partial = json.dumps({"v": 1, "type": "annotation", "reader_id": "r1",
                          "item_id": items[1].item_id, "quality": 3}).encode()
    path.write_bytes(raw + partial[:25])

    replayed = StudyStore.open(path)
    assert ("r1", items[0].item_id) in replayed.annotations  # durable one kept
    assert ("r1", items[1].item_id) not in replayed.annotations


def test_next_item_idempotent_and_advances(tmp_path):
    store, items = fresh_store(tmp_path, make_subjects(1), readers=("r1",))
    first = store.next_item("r1")
    assert store.next_item("r1").item_id == first.item_id  # no submit: same
    store.record_annotation(make_annotation("r1", first))
    second = store.next_item("r1")
    assert second.item_id != first.item_id
    done, total = store.reader_progress("r1")
    assert (done, total) == (1, 10)


def test_store_wire_items_carry_no_leaking_tokens(tmp_path):
    # the serialized store DOES hold views/variant (server side); the
    # item ids alone are what readers see, so scan those
    store, items = fresh_store(tmp_path, make_subjects(2, 1))
    for item in items:
        for leak in ("sparse", "processed", "views", "variant"):
            assert leak not in item.item_id


# ---------------------------------------------------------------------------
# analyze


def annotate_everything(store, items, readers, score_fn):
    """score_fn(reader, item, truth) -> (quality, confidence, artifacts, mask)"""
    for reader in readers:
        for item_id in store.readers[reader]["order"]:
            item = store.items[item_id]
            truth = store.truths[item.subject_id]
            q, c, a, mask = score_fn(reader, item, truth)
            store.record_annotation(Annotation(
                reader_id=reader, item_id=item_id, quality=q, confidence=c,
                artifacts=a, mask=mask))


def truth_tracing_scorer(boost: int = 0):
    def score(reader, item, truth):
        bump = boost if item.variant == "processed" else 0
        quality = min(6, 3 + bump)
        confidence = min(6, 3 + bump)
        artifacts = max(1, 3 - bump)
        if truth["diseased"]:
            mask = truth["mask"].copy()
        else:
            mask = np.zeros((item.size, item.size), dtype=bool)
        return quality, confidence, artifacts, mask

    return score


def test_analyze_requires_completeness_unless_partial(tmp_path):
    store, items = fresh_store(tmp_path, make_subjects(2, 1))
    with pytest.raises(StudyError):
        analyze(store)
    store.record_annotation(make_annotation("r1", items[0]))
    report = analyze(store, partial=True)
    assert report.n_readers == 3


def test_processed_dominance_gives_small_p_everywhere(tmp_path):
    subjects = make_subjects(12, 7)
    store, items = fresh_store(tmp_path, subjects)
    annotate_everything(store, items, ("r1", "r2", "r3"), truth_tracing_scorer(boost=1))
    report = analyze(store)
    for views in STUDY_VIEW_LEVELS:
        for measure in ("quality", "confidence", "artifacts"):
            assert report.pvalues[f"{views}/{measure}"] < 0.05
        gap = (report.cells[f"{views}/processed"]["means"]["quality"]["mean"]
               - report.cells[f"{views}/sparse"]["means"]["quality"]["mean"])
        assert abs(gap - 1.0) < 1e-12


def test_identical_scores_give_undefined_or_one_p(tmp_path):
    subjects = make_subjects(3, 2)
    store, items = fresh_store(tmp_path, subjects)
    annotate_everything(store, items, ("r1", "r2", "r3"), truth_tracing_scorer(boost=0))
    report = analyze(store)
    for views in STUDY_VIEW_LEVELS:
        for measure in ("quality", "confidence", "artifacts", "dsc"):
            p = report.pvalues[f"{views}/{measure}"]
            assert p is None or p == 1.0
        gap = (report.cells[f"{views}/processed"]["means"]["quality"]["mean"]
               - report.cells[f"{views}/sparse"]["means"]["quality"]["mean"])
        assert gap == 0.0


def test_pooled_cell_n_is_readers_times_subjects(tmp_path):
    subjects = make_subjects(12, 7)
    store, items = fresh_store(tmp_path, subjects)
    annotate_everything(store, items, ("r1", "r2", "r3"), truth_tracing_scorer())
    report = analyze(store)
    for views in STUDY_VIEW_LEVELS:
        for variant in ("sparse", "processed"):
            assert report.cells[f"{views}/{variant}"]["n"] == 57


def test_analyze_reproduces_published_processed_64_row(tmp_path):
    # 12 diseased + 7 healthy x 3 readers; at the 64-view processed cell:
    # 34 overlapping, 2 missed, 19 clean-healthy, 2 false-marked
    subjects = make_subjects(12, 7)
    store, items = fresh_store(tmp_path, subjects)
    readers = ("r1", "r2", "r3")

    diseased_ids = [s.subject_id for s in subjects if s.diseased]
    fn_cases = {("r1", diseased_ids[0]), ("r2", diseased_ids[5])}
    healthy_ids = [s.subject_id for s in subjects if not s.diseased]
    fp_cases = {("r3", healthy_ids[0]), ("r1", healthy_ids[4])}

    def score(reader, item, truth):
        special = item.views == 64 and item.variant == "processed"
        mask = np.zeros((item.size, item.size), dtype=bool)
        if truth["diseased"]:
            if special and (reader, item.subject_id) in fn_cases:
                mask[0:2, 0:2] = True  # marked, but no overlap: FN
            else:
                mask = truth["mask"].copy()
        else:
            if special and (reader, item.subject_id) in fp_cases:
                mask[1:3, 1:3] = True  # nonexistent nodule: FP
        return 4, 4, 2, mask

    annotate_everything(store, items, readers, score)
    report = analyze(store)
    cell = report.cells["64/processed"]
    assert cell["confusion"] == {"tp": 34, "fn": 2, "tn": 19, "fp": 2}
    stats = cell["stats"]
    assert abs(stats["sensitivity"] - 0.94) < 0.005
    assert abs(stats["specificity"] - 0.90) < 0.005
    assert abs(stats["f1"] - 0.94) < 0.005
    assert abs(stats["npv"] - 0.90) < 0.005


def test_analyze_reader_clustering_flag(tmp_path):
    subjects = make_subjects(4, 2)
    store, items = fresh_store(tmp_path, subjects)
    annotate_everything(store, items, ("r1", "r2", "r3"), truth_tracing_scorer(1))
    by_subject = analyze(store, cluster_by="subject")
    by_reader = analyze(store, cluster_by="reader")
    for views in STUDY_VIEW_LEVELS:
        p_subject = by_subject.pvalues[f"{views}/quality"]
        p_reader = by_reader.pvalues[f"{views}/quality"]
        assert p_subject < 0.05  # 6 subject clusters of uniform dominance
        # 3 reader clusters bound the statistic at Z = sqrt(3): coarser
        # clustering is more conservative on the same data
        assert abs(p_reader - 0.0833) < 0.001
        assert p_reader > p_subject
    with pytest.raises(StudyError):
        analyze(store, cluster_by="site")


def test_analyze_pure_function_of_store(tmp_path):
    subjects = make_subjects(3, 2)
    store, items = fresh_store(tmp_path, subjects)
    annotate_everything(store, items, ("r1", "r2", "r3"), truth_tracing_scorer(1))
    a = analyze(store).to_json_dict()
    store.close()
    b = analyze(StudyStore.open(tmp_path / "store.jsonl")).to_json_dict()
    assert a == b


def test_report_csv_outputs(tmp_path):
    subjects = make_subjects(3, 2)
    store, items = fresh_store(tmp_path, subjects)
    annotate_everything(store, items, ("r1", "r2", "r3"), truth_tracing_scorer(1))
    report = analyze(store)
    report.save_json(tmp_path / "report.json")
    report.save_diagnostics_csv(tmp_path / "diagnostics.csv")
    report.save_means_csv(tmp_path / "means.csv")
    diagnostics = (tmp_path / "diagnostics.csv").read_text().splitlines()
    assert diagnostics[0] == "variant,metric,16,32,64,128,256"
    assert len(diagnostics) == 9
    means = (tmp_path / "means.csv").read_text().splitlines()
    assert len(means) == 1 + len(STUDY_VIEW_LEVELS) * 2 * 4
