"""Pretraining-corpus construction from forum-style post dumps.

A post (title + comment forest) is split into threads, one per top-level
comment.  Each sufficiently large, unflagged thread becomes a training
instance: the pseudo-summary is the cleaned title concatenated with the
cleaned lead comment, and the lead comment's slot in the tree is replaced
by the mask token so the model cannot copy its own target.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .conversation import ConversationTree, TreeError, Utterance
from .tokenizer import MASK_TOKEN, URL_TOKEN

__all__ = [
    "CorpusError",
    "RawComment",
    "RawPost",
    "TrainingInstance",
    "CorpusStats",
    "post_from_record",
    "clean_text",
    "extract_threads",
    "rejection_reason",
    "build_instance",
    "build_corpus",
    "write_instances",
    "read_instances",
]

MIN_COMMENTS_DEFAULT = 10

_URL_RE = re.compile(r"(?:https?://|www\.)\S+")
_MARKUP_CHARS = str.maketrans("", "", "*~[]")
_URL_SENTINEL = "\x00URL\x00"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class RawComment:
    id: str
    parent_id: Optional[str]  # None = replies to the post itself
    timestamp: int
    author: Optional[str]
    text: str
    score: int = 0


@dataclass(frozen=True)
class RawPost:
    title: str
    title_score: int
    flags: frozenset
    comments: Tuple[RawComment, ...]
    meta: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class TrainingInstance:
    tree: ConversationTree
    pseudo_summary: str
    source_meta: dict = field(default_factory=dict, compare=False)


@dataclass
class CorpusStats:
    posts: int = 0
    threads: int = 0
    kept: int = 0
    comments_skipped: int = 0
    rejected: Dict[str, int] = field(default_factory=dict)

    def reject(self, reason: str) -> None:
        self.rejected[reason] = self.rejected.get(reason, 0) + 1

    def to_json(self) -> str:
        payload = {
            "posts": self.posts,
            "threads": self.threads,
            "instances_kept": self.kept,
            "comments_skipped": self.comments_skipped,
            "rejected": dict(sorted(self.rejected.items())),
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def post_from_record(obj: dict) -> RawPost:
    """Adapt one Pushshift-style submission record (with embedded comments).

    Recognized flag sources: an explicit "flags" list, plus the usual field
    conventions over_18 -> nsfw, quarantine, is_video -> video, and
    post_hint == "image" -> picture.  Comment parent ids may carry t1_/t3_
    prefixes; t3_ (the post itself) means top-level.
    """
    flags = set(obj.get("flags", ()))
    if obj.get("over_18"):
        flags.add("nsfw")
    if obj.get("quarantine"):
        flags.add("quarantine")
    if obj.get("is_video"):
        flags.add("video")
    if obj.get("post_hint") == "image":
        flags.add("picture")

    comments = []
    for c in obj.get("comments", ()):
        parent = c.get("parent_id")
        if parent is not None:
            if parent.startswith("t3_"):
                parent = None
            elif parent.startswith("t1_"):
                parent = parent[3:]
        comments.append(RawComment(
            id=str(c["id"]),
            parent_id=parent,
            timestamp=int(c.get("created_utc", c.get("timestamp", 0))),
            author=c.get("author"),
            text=c.get("body", c.get("text", "")),
            score=int(c.get("score", 0)),
        ))

    meta = {k: obj[k] for k in ("id", "subreddit") if k in obj}
    return RawPost(
        title=obj.get("title", ""),
        title_score=int(obj.get("score", obj.get("title_score", 0))),
        flags=frozenset(flags),
        comments=tuple(comments),
        meta=meta,
    )


def clean_text(raw: str) -> str:
    """Normalize raw comment text: URLs to the url token, markup stripped.

    Existing url-token surfaces are protected before the bracket strip so
    the function is idempotent.
    """
    s = raw.replace(URL_TOKEN, _URL_SENTINEL)
    s = _URL_RE.sub(_URL_SENTINEL, s)
    s = s.translate(_MARKUP_CHARS)
    s = " ".join(s.split())
    return s.replace(_URL_SENTINEL, URL_TOKEN)


def extract_threads(post: RawPost, stats: Optional[CorpusStats] = None) -> List[ConversationTree]:
    """One tree per top-level comment, covering its full reply subtree.

    Comments whose parent chain does not reach a top-level comment (dangling
    references, or descendants of invalid records) are skipped and counted,
    as are threads whose timestamps cannot form a valid tree.
    """
    children: Dict[Optional[str], List[RawComment]] = {}
    for c in post.comments:
        children.setdefault(c.parent_id, []).append(c)

    trees: List[ConversationTree] = []
    grouped = 0
    for top in children.get(None, ()):
        group = []
        queue = [top]
        while queue:
            node = queue.pop()
            group.append(node)
            queue.extend(children.get(node.id, ()))
        grouped += len(group)
        records = [
            Utterance(id=c.id, author=c.author, text=c.text, timestamp=c.timestamp,
                      parent_id=c.parent_id if c is not top else None, score=c.score)
            for c in group
        ]
        try:
            trees.append(ConversationTree.from_records(records))
        except TreeError:
            if stats is not None:
                stats.reject("invalid_tree")
    if stats is not None:
        # dangling parents and their descendants never join a group
        stats.comments_skipped += len(post.comments) - grouped
    return trees


def rejection_reason(post: RawPost, thread: ConversationTree,
                     min_comments: int = MIN_COMMENTS_DEFAULT) -> Optional[str]:
    """First filter that fires for this thread, or None if it passes."""
    if len(thread) < min_comments:
        return "too_few_comments"
    if "nsfw" in post.flags:
        return "nsfw"
    lead = thread[0]
    if post.title_score < 0 or (lead.score is not None and lead.score < 0):
        return "negative_score"
    if post.flags & {"quarantine", "picture", "video"}:
        return "media_or_quarantine"
    return None


def build_instance(post: RawPost, thread: ConversationTree,
                   min_comments: int = MIN_COMMENTS_DEFAULT) -> Optional[TrainingInstance]:
    """Filtered (title + lead)-supervised instance; None when a filter fires."""
    if rejection_reason(post, thread, min_comments) is not None:
        return None
    lead = thread[0]
    summary = (clean_text(post.title) + " " + clean_text(lead.text)).strip()
    if not summary:
        return None
    utts = [replace(u, text=MASK_TOKEN if u.id == 0 else clean_text(u.text)) for u in thread]
    meta = dict(post.meta)
    meta["thread_root"] = lead.meta.get("source_id", lead.id)
    return TrainingInstance(tree=ConversationTree(utts), pseudo_summary=summary, source_meta=meta)


# ---------------------------------------------------------------------------
# serialization


def _utt_to_obj(u: Utterance) -> dict:
    # absent optional fields are omitted from the record
    obj = {"id": u.id, "ts": u.timestamp, "text": u.text}
    if u.parent_id is not None:
        obj["parent"] = u.parent_id
    if u.author is not None:
        obj["author"] = u.author
    if u.role is not None:
        obj["role"] = u.role
    if u.score is not None:
        obj["score"] = u.score
    if u.meta:
        obj["meta"] = u.meta
    return obj


def _utt_from_obj(o: dict) -> Utterance:
    return Utterance(
        id=o["id"], parent_id=o.get("parent"), timestamp=o["ts"],
        author=o.get("author"), role=o.get("role"), score=o.get("score"),
        text=o["text"], meta=dict(o.get("meta", {})),
    )


def instance_to_record(inst: TrainingInstance) -> dict:
    record = {
        "summary": inst.pseudo_summary,
        "utterances": [_utt_to_obj(u) for u in inst.tree],
    }
    if inst.source_meta:
        record["meta"] = inst.source_meta
    return record


def instance_from_record(obj: dict) -> TrainingInstance:
    tree = ConversationTree([_utt_from_obj(o) for o in obj["utterances"]])
    return TrainingInstance(tree=tree, pseudo_summary=obj["summary"],
                            source_meta=dict(obj.get("meta", {})))


def _dump_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"), sort_keys=True) + "\n"


def write_instances(path: str, instances: Iterable[TrainingInstance]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(_dump_line(instance_to_record(inst)))
            n += 1
    return n


def read_instances(path: str) -> Iterator[TrainingInstance]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield instance_from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TreeError) as e:
                raise CorpusError(f"{path}:{lineno}: malformed instance record ({e})") from e


def build_corpus(
    posts: Iterable[dict],
    out_prefix: str,
    min_comments: int = MIN_COMMENTS_DEFAULT,
    shard_size: int = 100000,
) -> Tuple[List[str], CorpusStats]:
    """Run the full pipeline over raw post records; returns shard paths + stats.

    Output order follows input order, so two runs over the same dump produce
    byte-identical shards.
    """
    stats = CorpusStats()
    shard_paths: List[str] = []
    buf: List[TrainingInstance] = []

    def flush():
        path = f"{out_prefix}-{len(shard_paths):05d}.jsonl"
        write_instances(path, buf)
        shard_paths.append(path)
        buf.clear()

    for obj in posts:
        stats.posts += 1
        post = post_from_record(obj)
        for thread in extract_threads(post, stats):
            stats.threads += 1
            reason = rejection_reason(post, thread, min_comments)
            if reason is not None:
                stats.reject(reason)
                continue
            inst = build_instance(post, thread, min_comments)
            if inst is None:
                stats.reject("empty_summary")
                continue
            stats.kept += 1
            buf.append(inst)
            if len(buf) >= shard_size:
                flush()
    if buf or not shard_paths:
        flush()
    return shard_paths, stats


def read_post_dump(path: str) -> Iterator[dict]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: malformed post record ({e})") from e
