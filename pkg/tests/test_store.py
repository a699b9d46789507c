import json
import random

import pytest

from boxchain.errors import (
    ConflictError,
    CorruptRecordError,
    StateError,
    ValidationError,
)
from boxchain.store import (
    DatasetRecord,
    DatasetStore,
    RecordDraft,
    ReviewQueue,
    Verdict,
    compute_manifest,
    load_manifest,
    write_manifest,
)


def draft(sample_id="s1", helpful=(1,), confusing=(2, 3), tag="demo", split="train", **kw):
    ids = set(helpful) | set(confusing)
    return RecordDraft(
        sample_id=sample_id,
        image_path=kw.get("image_path", "/img/p1.png"),
        layout_path=kw.get("layout_path", "/lay/p1.json"),
        question="q?",
        answers=("a",),
        helpful=tuple(sorted(helpful)),
        confusing=tuple(sorted(confusing)),
        rationales={i: f"reason {i}" for i in ids},
        dataset_tag=tag,
        split=split,
    )


class TestDatasetStore:
    def test_round_trip(self, tmp_path):
        store = DatasetStore(tmp_path)
        rec = DatasetRecord(draft=draft(), provenance="auto_passed")
        store.append(rec)
        loaded = store.load("demo")
        assert loaded == [rec]

    def test_overlapping_sets_rejected_on_write(self, tmp_path):
        store = DatasetStore(tmp_path)
        with pytest.raises(ValidationError, match="overlap"):
            store.append(DatasetRecord(draft=draft(helpful=(1, 2), confusing=(2,)), provenance="auto_passed"))

    def test_duplicate_sample_id_rejected(self, tmp_path):
        store = DatasetStore(tmp_path)
        store.append(DatasetRecord(draft=draft(), provenance="auto_passed"))
        with pytest.raises(ValidationError, match="already"):
            store.append(DatasetRecord(draft=draft(), provenance="human_accepted"))

    def test_corrupt_line_reported_with_number(self, tmp_path):
        store = DatasetStore(tmp_path)
        store.append(DatasetRecord(draft=draft(), provenance="auto_passed"))
        with store.path("demo").open("a", encoding="utf-8") as fh:
            fh.write('{"sample_id": "broken"}\n')
        with pytest.raises(CorruptRecordError, match=":2"):
            store.load("demo")

    def test_missing_rationale_rejected(self, tmp_path):
        store = DatasetStore(tmp_path)
        d = draft()
        d = RecordDraft(**{**d.__dict__, "rationales": {1: "only one"}})
        with pytest.raises(ValidationError, match="rationale"):
            store.append(DatasetRecord(draft=d, provenance="auto_passed"))

    def test_unknown_provenance_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            DatasetRecord(draft=draft(), provenance="guessed")


class TestManifest:
    def test_empty(self, tmp_path):
        store = DatasetStore(tmp_path)
        m = compute_manifest(store, "demo")
        assert m.question_count == 0 and m.image_count == 0 and m.mean_key_boxes == 0.0

    def test_three_key_boxes_mean(self, tmp_path):
        store = DatasetStore(tmp_path)
        for i in range(10):
            store.append(
                DatasetRecord(
                    draft=draft(sample_id=f"s{i}", helpful=(1,), confusing=(2, 3),
                                image_path=f"/img/p{i % 4}.png"),
                    provenance="auto_passed",
                )
            )
        m = compute_manifest(store, "demo")
        assert m.question_count == 10
        assert m.image_count == 4
        assert m.mean_key_boxes == 3.00

    def test_counts_match_brute_force_after_randomized_appends(self, tmp_path):
        rng = random.Random(3)
        store = DatasetStore(tmp_path)
        expected_images = set()
        expected_splits = {}
        total_keys = 0
        n = 300
        for i in range(n):
            helpful = tuple(rng.sample(range(1, 10), rng.randint(1, 3)))
            pool = [x for x in range(1, 10) if x not in helpful]
            confusing = tuple(rng.sample(pool, rng.randint(0, 3)))
            split = rng.choice(["train", "val"])
            image = f"/img/p{rng.randint(0, 25)}.png"
            store.append(
                DatasetRecord(
                    draft=draft(sample_id=f"s{i}", helpful=helpful, confusing=confusing,
                                split=split, image_path=image),
                    provenance="auto_passed",
                )
            )
            expected_images.add(image)
            expected_splits[split] = expected_splits.get(split, 0) + 1
            total_keys += len(set(helpful) | set(confusing))
        m = compute_manifest(store, "demo")
        assert m.question_count == n
        assert m.image_count == len(expected_images)
        assert m.split_counts == expected_splits
        assert m.mean_key_boxes == round(total_keys / n, 2)

    def test_manifest_load_verifies(self, tmp_path):
        store = DatasetStore(tmp_path)
        store.append(DatasetRecord(draft=draft(), provenance="auto_passed"))
        write_manifest(store, "demo")
        assert load_manifest(store, "demo").question_count == 1
        # tamper with the dataset behind the manifest's back
        store.append(DatasetRecord(draft=draft(sample_id="s2"), provenance="auto_passed"))
        with pytest.raises(CorruptRecordError):
            load_manifest(store, "demo")


class TestReviewQueue:
    def queue(self, tmp_path):
        store = DatasetStore(tmp_path / "datasets")
        return ReviewQueue(tmp_path / "queue.jsonl", store), store

    def test_enqueue_accept_round_trip(self, tmp_path):
        queue, store = self.queue(tmp_path)
        item = queue.enqueue(draft(), ["entailment"])
        assert queue.next_pending().item_id == item.item_id
        queue.submit_verdict(item.item_id, Verdict(status="accepted", reviewer="rev"))
        assert queue.next_pending() is None
        records = store.load("demo")
        assert len(records) == 1
        assert records[0].provenance == "human_accepted"

    def test_conservation(self, tmp_path):
        queue, _ = self.queue(tmp_path)
        items = [queue.enqueue(draft(sample_id=f"s{i}"), ["min-3"]) for i in range(4)]
        queue.submit_verdict(items[0].item_id, Verdict(status="accepted", reviewer="r"))
        queue.submit_verdict(items[1].item_id, Verdict(status="rejected", reviewer="r"))
        counts = queue.counts()
        assert counts["enqueued"] == 4
        assert counts["pending"] + counts["accepted"] + counts["corrected"] + counts["rejected"] == 4

    def test_idempotent_identical_verdict(self, tmp_path):
        queue, store = self.queue(tmp_path)
        item = queue.enqueue(draft(), ["entailment"])
        v = Verdict(status="accepted", reviewer="rev")
        queue.submit_verdict(item.item_id, v)
        queue.submit_verdict(item.item_id, v)  # no-op
        assert len(store.load("demo")) == 1

    def test_conflicting_verdict_rejected(self, tmp_path):
        queue, _ = self.queue(tmp_path)
        item = queue.enqueue(draft(), ["entailment"])
        queue.submit_verdict(item.item_id, Verdict(status="accepted", reviewer="rev"))
        with pytest.raises(ConflictError):
            queue.submit_verdict(item.item_id, Verdict(status="rejected", reviewer="other"))

    def test_verdict_on_unknown_item(self, tmp_path):
        queue, _ = self.queue(tmp_path)
        with pytest.raises(StateError):
            queue.submit_verdict("nope", Verdict(status="rejected", reviewer="r"))

    def test_rejected_items_do_not_write_records(self, tmp_path):
        queue, store = self.queue(tmp_path)
        item = queue.enqueue(draft(), ["disjointness"])
        queue.submit_verdict(item.item_id, Verdict(status="rejected", reviewer="r"))
        assert store.load("demo") == []

    def test_corrected_requires_structurally_valid_annotation(self, tmp_path):
        queue, _ = self.queue(tmp_path)
        item = queue.enqueue(draft(), ["disjointness"])
        bad = draft(helpful=(1, 2), confusing=(2,))
        with pytest.raises(ValidationError):
            queue.submit_verdict(
                item.item_id, Verdict(status="corrected", reviewer="r", corrected=bad)
            )

    def test_replay_from_disk(self, tmp_path):
        queue, _ = self.queue(tmp_path)
        a = queue.enqueue(draft(sample_id="s1"), ["min-3"])
        queue.enqueue(draft(sample_id="s2"), ["entailment"])
        queue.submit_verdict(a.item_id, Verdict(status="rejected", reviewer="rev"))

        reloaded = ReviewQueue(tmp_path / "queue.jsonl")
        counts = reloaded.counts()
        assert counts == {"pending": 1, "accepted": 0, "corrected": 0, "rejected": 1, "enqueued": 2}
        assert reloaded.next_pending().draft.sample_id == "s2"

    def test_verdict_needs_reviewer(self):
        with pytest.raises(Exception):
            Verdict(status="accepted", reviewer="")

    def test_accept_of_structurally_broken_draft_rejected(self, tmp_path):
        queue, _ = self.queue(tmp_path)
        broken = draft(helpful=(1, 2), confusing=(2,))
        item = queue.enqueue(broken, ["disjointness"])
        with pytest.raises(ValidationError):
            queue.submit_verdict(item.item_id, Verdict(status="accepted", reviewer="r"))
