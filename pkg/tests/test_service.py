import json
import threading

import numpy as np
import pytest
import requests

from invattack.dataset_io import GalleryEntry, quantize
from invattack.errors import (BudgetExceeded, DuplicateVote,
                              NoVotes, StaleSession, UnknownImage, UnknownItem)
from invattack.service import (AnnotationStore, LabelingTask, TaskItem,
                               UNREADABLE, compute_success, serve)


@pytest.fixture()
def store(digit_train, tmp_path):
    return AnnotationStore(digit_train, tmp_path / "data")


class TestSessions:
    def test_fresh_session_matches_base(self, store):
        view = store.create_session(3, "linf", 0.4)
        assert view["pixels"] == view["base_pixels"]
        assert view["l0_used"] == 0 and view["linf_used"] == 0.0
        assert view["epsilon"] == 0.4 and view["revision"] == 0

    def test_unknown_image(self, store):
        with pytest.raises(UnknownImage):
            store.create_session(10_000, "linf", 0.4)

    def test_linf_budget_rejects_half_step(self, store, digit_train):
        # find a background pixel (value 0.0) and push it past the budget
        view = store.create_session(0, "linf", 0.4)
        base = digit_train[0].image.flat
        pixel = int(np.argmin(base))
        assert base[pixel] == 0.0
        with pytest.raises(BudgetExceeded):
            store.apply_edit(view["id"], [(pixel, 0.5)])
        after = store.get_session(view["id"])
        assert after["pixels"] == after["base_pixels"]  # atomic: nothing applied
        assert after["revision"] == 0

    def test_linf_budget_allows_exact_epsilon(self, store, digit_train):
        view = store.create_session(0, "linf", 0.4)
        pixel = int(np.argmin(digit_train[0].image.flat))
        out = store.apply_edit(view["id"], [(pixel, 0.4)])
        assert out["linf_used"] == pytest.approx(0.4, abs=1e-7)

    def test_l0_budget_counts_and_reverts(self, store, digit_train):
        view = store.create_session(1, "l0", 25)
        base = digit_train[1].image.flat
        dark = [i for i in range(784) if base[i] < 0.2][:26]
        store.apply_edit(view["id"], [(p, 1.0) for p in dark[:25]])
        with pytest.raises(BudgetExceeded):
            store.apply_edit(view["id"], [(dark[25], 1.0)])
        # reverting one touched pixel frees budget for a new one
        store.apply_edit(view["id"], [(dark[0], float(base[dark[0]]))])
        out = store.apply_edit(view["id"], [(dark[25], 1.0)])
        assert out["l0_used"] == 25

    def test_edit_log_replay_reproduces_pixels(self, store, digit_train, tmp_path):
        view = store.create_session(2, "linf", 0.5)
        rng = np.random.default_rng(0)
        sid = view["id"]
        for _ in range(4):
            pix = [int(p) for p in rng.integers(0, 784, size=5)]
            base = digit_train[2].image.flat
            edits = [(p, float(np.clip(base[p] + rng.uniform(-0.5, 0.5), 0, 1)))
                     for p in pix]
            store.apply_edit(sid, edits)
        final = store.get_session(sid)
        # replay the log from the base image
        replayed = digit_train[2].image.pixels.astype(np.float64).reshape(-1)
        for pixel, _old, new, _ts in final["edit_log"]:
            replayed[pixel] = new
        assert quantize(replayed).tolist() == final["pixels"]
        # a fresh store replaying the same files agrees byte for byte
        store2 = AnnotationStore(store.ds, store.data_dir)
        assert store2.get_session(sid)["pixels"] == final["pixels"]
        assert store2.get_session(sid)["revision"] == final["revision"]

    def test_stale_revision(self, store):
        view = store.create_session(0, "linf", 0.4)
        store.apply_edit(view["id"], [(0, 0.1)], revision=0)
        with pytest.raises(StaleSession):
            store.apply_edit(view["id"], [(1, 0.1)], revision=0)

    def test_unknown_session(self, store):
        with pytest.raises(StaleSession):
            store.apply_edit("s99999", [(0, 0.1)])


class TestSaveExample:
    def test_save_and_fetch(self, store):
        view = store.create_session(4, "linf", 0.4)
        store.apply_edit(view["id"], [(10, 0.3), (11, 0.25)])
        saved = store.save_example(view["id"], claimed_label=7)
        gallery = store.gallery_view()
        match = [g for g in gallery if g["id"] == saved["example_id"]]
        assert len(match) == 1
        current = store.get_session(view["id"])["pixels"]
        assert match[0]["pixels"] == current

    def test_norms_recomputed_server_side(self, store, digit_train):
        view = store.create_session(5, "l0", 30)
        base = digit_train[5].image.flat
        dark = [i for i in range(784) if base[i] < 0.2][:8]
        store.apply_edit(view["id"], [(p, 0.9) for p in dark])
        saved = store.save_example(view["id"], claimed_label=2)
        assert saved["l0"] == 8

    def test_two_saves_distinct_ids(self, store):
        view = store.create_session(6, "linf", 0.4)
        a = store.save_example(view["id"], claimed_label=1)
        b = store.save_example(view["id"], claimed_label=1)
        assert a["example_id"] != b["example_id"]


def make_task(store, n_crafted=2, n_clean=2, seed=7, threshold=0.7):
    ids = []
    for i in range(n_crafted):
        view = store.create_session(i, "linf", 0.4)
        ids.append(store.save_example(view["id"], claimed_label=9)["example_id"])
    task = store.create_task(ids, list(range(10, 10 + n_clean)), seed=seed,
                             threshold=threshold)
    return task["task_id"]


class TestTasks:
    def test_shuffle_deterministic(self, store):
        t1 = make_task(store, seed=3)
        t2 = make_task(store, seed=3)
        seq1, seq2 = [], []
        for tid, seq in ((t1, seq1), (t2, seq2)):
            while True:
                nxt = store.next_item(tid, "r1")
                if nxt["done"]:
                    break
                seq.append(nxt["image"]["pixels"])
                store.submit_vote(tid, "r1", nxt["item_id"], 0)
        assert seq1 == seq2

    def test_provenance_hidden_from_raters(self, store):
        tid = make_task(store)
        nxt = store.next_item(tid, "alice")
        assert "provenance" not in nxt and "kind" not in nxt
        assert "provenance" not in nxt.get("image", {})

    def test_duplicate_vote_rejected(self, store):
        tid = make_task(store)
        nxt = store.next_item(tid, "bob")
        store.submit_vote(tid, "bob", nxt["item_id"], 3)
        with pytest.raises(DuplicateVote):
            store.submit_vote(tid, "bob", nxt["item_id"], 4)

    def test_unknown_item(self, store):
        tid = make_task(store)
        with pytest.raises(UnknownItem):
            store.submit_vote(tid, "bob", "nope", 3)

    def test_report_requires_votes(self, store):
        tid = make_task(store)
        with pytest.raises(NoVotes):
            store.report(tid)

    def test_votes_survive_restart(self, store):
        tid = make_task(store, n_crafted=1, n_clean=1)
        for rater in ("a", "b"):
            while True:
                nxt = store.next_item(tid, rater)
                if nxt["done"]:
                    break
                store.submit_vote(tid, rater, nxt["item_id"], 5)
        report = store.report(tid)
        store2 = AnnotationStore(store.ds, store.data_dir)
        assert store2.report(tid) == report


def fixture_task(votes_per_item, original_label=3, threshold=0.7):
    """LabelingTask with one item and a prescribed vote multiset."""
    item = TaskItem(item_id="t-i0", kind="crafted", ref="e0",
                    original_label=original_label,
                    pixels=np.zeros((2, 2), dtype=np.float32))
    task = LabelingTask(id="t", items=[item], threshold=threshold, seed=0)
    for i, lab in enumerate(votes_per_item):
        task.votes[(f"r{i}", "t-i0")] = lab
    return task


class TestComputeSuccess:
    def test_seven_of_ten_different_label_succeeds(self):
        task = fixture_task([5] * 7 + [3, 1, UNREADABLE], original_label=3)
        report = compute_success(task)
        assert report["items"][0]["verdict"] == "success"
        assert report["aggregate"]["success_rate"] == 1.0

    def test_seven_of_ten_original_label_fails(self):
        task = fixture_task([3] * 7 + [5, 5, 1], original_label=3)
        report = compute_success(task)
        assert report["items"][0]["verdict"] == "original"

    def test_five_five_split_no_consensus(self):
        task = fixture_task([5] * 5 + [3] * 5, original_label=3)
        report = compute_success(task)
        assert report["items"][0]["verdict"] == "no_consensus"

    def test_unreadable_consensus_not_success(self):
        task = fixture_task([UNREADABLE] * 8 + [5, 3], original_label=3)
        report = compute_success(task)
        assert report["items"][0]["verdict"] == "no_consensus"

    def test_pure_function_of_votes(self):
        a = fixture_task([5] * 7 + [3] * 3)
        b = fixture_task(list(reversed([5] * 7 + [3] * 3)))
        assert compute_success(a) == compute_success(b)

    def test_threshold_inclusive(self):
        task = fixture_task([5, 5, 5, 5, 5, 5, 5, 3, 3, 3], threshold=0.7)
        assert compute_success(task)["items"][0]["verdict"] == "success"


@pytest.fixture(scope="module")
def live_server(digit_train, tmp_path_factory):
    store = AnnotationStore(digit_train, tmp_path_factory.mktemp("svc"),
                            gallery=[GalleryEntry(0, digit_train[0].label,
                                                  "linf", 0.4,
                                                  digit_train[1].image)])
    server = serve(store, host="127.0.0.1", port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base
    server.shutdown()
    server.server_close()


class TestHttp:
    def test_health(self, live_server):
        r = requests.get(f"{live_server}/health")
        assert r.status_code == 200 and r.json()["status"] == "ok"

    def test_image_endpoint(self, live_server, digit_train):
        r = requests.get(f"{live_server}/images/3")
        assert r.status_code == 200
        body = r.json()
        assert body["width"] == 28 and len(body["pixels"]) == 784
        assert body["pixels"] == digit_train[3].image.to_bytes_list()

    def test_image_not_found(self, live_server):
        r = requests.get(f"{live_server}/images/99999")
        assert r.status_code == 404
        assert r.json()["code"] == "unknown_image"

    def test_session_flow_and_budget_conflict(self, live_server):
        r = requests.post(f"{live_server}/sessions",
                          json={"base_index": 2, "norm": "linf", "epsilon": 0.4})
        sid = r.json()["id"]
        base = r.json()["base_pixels"]
        dark = next(i for i, v in enumerate(base) if v == 0)
        r = requests.post(f"{live_server}/sessions/{sid}/edits",
                          json={"edits": [[dark, 0.5]]})
        assert r.status_code == 409 and r.json()["code"] == "budget_exceeded"
        r = requests.post(f"{live_server}/sessions/{sid}/edits",
                          json={"edits": [[dark, 0.35]]})
        assert r.status_code == 200 and r.json()["revision"] == 1
        r = requests.post(f"{live_server}/sessions/{sid}/save",
                          json={"claimed_label": 8})
        assert r.status_code == 200 and r.json()["example_id"]
        r = requests.get(f"{live_server}/sessions/{sid}")
        assert r.status_code == 200 and len(r.json()["edit_log"]) == 1

    def test_gallery_includes_loaded_entries(self, live_server):
        r = requests.get(f"{live_server}/gallery")
        assert r.status_code == 200
        assert any(e["provenance"] == "gallery" for e in r.json())

    def test_task_flow(self, live_server):
        r = requests.get(f"{live_server}/gallery")
        ex_id = r.json()[0]["id"]
        r = requests.post(f"{live_server}/tasks",
                          json={"example_ids": [ex_id], "clean_indices": [4],
                                "seed": 1})
        tid = r.json()["task_id"]
        for rater in ("x", "y"):
            while True:
                nxt = requests.get(f"{live_server}/tasks/{tid}/next",
                                   params={"rater": rater}).json()
                if nxt["done"]:
                    break
                r = requests.post(f"{live_server}/tasks/{tid}/votes",
                                  json={"rater": rater,
                                        "item_id": nxt["item_id"], "label": 5})
                assert r.status_code == 200
        rep = requests.get(f"{live_server}/tasks/{tid}/report")
        assert rep.status_code == 200
        assert rep.json()["aggregate"]["count"] == 2

    def test_duplicate_vote_http(self, live_server):
        r = requests.get(f"{live_server}/gallery")
        ex_id = r.json()[0]["id"]
        tid = requests.post(f"{live_server}/tasks",
                            json={"example_ids": [ex_id], "clean_indices": [],
                                  "seed": 2}).json()["task_id"]
        nxt = requests.get(f"{live_server}/tasks/{tid}/next",
                           params={"rater": "dup"}).json()
        requests.post(f"{live_server}/tasks/{tid}/votes",
                      json={"rater": "dup", "item_id": nxt["item_id"],
                            "label": "unreadable"})
        r = requests.post(f"{live_server}/tasks/{tid}/votes",
                          json={"rater": "dup", "item_id": nxt["item_id"],
                                "label": 1})
        assert r.status_code == 409 and r.json()["code"] == "duplicate_vote"

    def test_bad_json_is_400(self, live_server):
        r = requests.post(f"{live_server}/sessions", data="{not json",
                          headers={"Content-Type": "application/json"})
        assert r.status_code == 400
