"""Synthetic document tasks on a decoupled complexity grid.

Documents are character streams whose *structural* complexity stands in for
visual complexity:

* ``V0``: plain sentences, no structure delimiters at all;
* ``V1``: a titled key/value record in the domain's layout style;
* ``V2``: several numbered segments serialized out of logical order, with a
  distractor block mixed in.

Reasoning levels:

* ``R0``: transcribe the document into its canonical linearization;
* ``R1``: return the value of one named field;
* ``R2``: single choice, pick the option naming the larger of two fields.

Every random draw is keyed by an explicit integer seed, so a document is a pure
function of ``(v_level, domain, doc_seed)`` and a case of ``(doc, case_seed)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import vocab
from .errors import FormatError, ValidationError
from .scoring import R_LEVELS, V_LEVELS

STRUCTURE_DELIMITERS = frozenset(":;|=[],")
TASK_TYPES = {"R0": "transcribe", "R1": "lookup", "R2": "compare"}
OPTION_LETTERS = "ABC"


@dataclass(frozen=True)
class Domain:
    name: str
    keys: tuple[str, ...]
    titles: tuple[str, ...]
    words: tuple[str, ...]
    kv_sep: str
    rec_sep: str


DOMAINS = {
    d.name: d
    for d in (
        Domain("gazette", ("day", "ed", "tel", "pg", "vol", "no"), ("news", "post", "daily"),
               ("mayor", "rain", "city", "team", "vote", "fair"), ":", ";"),
        Domain("ledger", ("dr", "cr", "net", "tax", "qty", "fee"), ("fy", "acct", "cash"),
               ("debt", "loss", "gain", "bond", "rent", "fund"), "|", ";"),
        Domain("chartnote", ("x", "y", "bar", "pk", "min", "avg"), ("fig", "plot", "chart"),
               ("peak", "dip", "axis", "trend", "scale", "line"), "=", ","),
    )
}


def _stable_int(*parts) -> int:
    h = hashlib.blake2b(json.dumps(parts, sort_keys=True).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") & ((1 << 63) - 1)


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(_stable_int(*parts))


@dataclass
class Annotations:
    """Ground-truth structure of a rendered document.

    ``segments`` lists ``(segment_title, keys)`` in logical order; ``order`` is
    the serialized position of each logical segment. ``sentences`` holds the
    numbers of a plain-text document, one per sentence.
    """

    fields: dict[str, str] = field(default_factory=dict)
    title: str = ""
    segments: list[tuple[str, list[str]]] = field(default_factory=list)
    order: list[int] = field(default_factory=list)
    distractors: list[str] = field(default_factory=list)
    sentences: list[str] = field(default_factory=list)
    text: str = ""
    kv_sep: str = ":"
    rec_sep: str = ";"


def _two_digit(rng, n: int) -> list[str]:
    return [f"{v:02d}" for v in rng.choice(np.arange(10, 100), size=n, replace=False)]


def render_document(v_level: str, domain: str, doc_seed: int) -> tuple[str, Annotations]:
    if v_level not in V_LEVELS:
        raise ValidationError(f"unknown visual level {v_level!r}")
    if domain not in DOMAINS:
        raise ValidationError(f"unknown domain {domain!r}")
    dom = DOMAINS[domain]
    rng = _rng("doc", v_level, domain, int(doc_seed))
    ann = Annotations(kv_sep=dom.kv_sep, rec_sep=dom.rec_sep)
    if v_level == "V0":
        nums = _two_digit(rng, 2)
        parts = []
        for n in nums:
            w1, w2 = rng.choice(len(dom.words), size=2, replace=False)
            parts.append(f"{dom.words[w1]} {dom.words[w2]} {n}.")
        ann.sentences = nums
        doc = " ".join(parts)
    elif v_level == "V1":
        keys = [dom.keys[i] for i in rng.choice(len(dom.keys), size=3, replace=False)]
        vals = _two_digit(rng, 3)
        ann.title = dom.titles[rng.integers(len(dom.titles))]
        ann.fields = dict(zip(keys, vals))
        ann.segments = [("", keys)]
        ann.order = [0]
        body = dom.rec_sep.join(f"{k}{dom.kv_sep}{v}" for k, v in zip(keys, vals))
        doc = f"{ann.title}.{body}"
    else:
        keys = [dom.keys[i] for i in rng.choice(len(dom.keys), size=4, replace=False)]
        vals = _two_digit(rng, 4)
        ann.fields = dict(zip(keys, vals))
        ann.segments = [("1", keys[:2]), ("2", keys[2:])]
        # serialized order never equals logical order
        ann.order = [1, 0]
        noise = "".join(chr(ord("a") + int(i)) for i in rng.integers(0, 26, size=2))
        ann.distractors = [f"-{noise}-"]
        blocks = [
            f"[{title}]" + dom.rec_sep.join(f"{k}{dom.kv_sep}{ann.fields[k]}" for k in seg_keys)
            for title, seg_keys in ann.segments
        ]
        serial = [blocks[i] for i in np.argsort(ann.order)]
        serial.insert(int(rng.integers(0, len(serial) + 1)), ann.distractors[0])
        doc = "".join(serial)
    ann.text = doc
    return doc, ann


def canonical_linearization(ann: Annotations) -> str:
    """Structured transcription target: logical order, ``key=value`` records."""
    if not ann.segments:
        return ann.text
    parts = []
    for title, keys in ann.segments:
        body = ";".join(f"{k}={ann.fields[k]}" for k in keys)
        parts.append(f"[{title}]{body}" if title else body)
    lead = f"{ann.title}." if ann.title else ""
    return lead + "".join(parts)


def augment_positional(ann: Annotations) -> Annotations:
    """Fallback for key-less documents: sentence ``i`` becomes field ``s{i}``."""
    out = Annotations(**{**asdict(ann)})
    out.fields = {f"s{i + 1}": n for i, n in enumerate(ann.sentences)}
    return out


@dataclass(frozen=True)
class TaskCase:
    case_id: str
    prompt: str
    ground_truth: str
    answer_kind: str  # "free_text" or "choice"
    r_level: str
    v_level: str
    domain: str
    task_type: str
    doc_seed: int
    case_seed: int = 0
    options: str = ""
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def tags(self) -> dict:
        return {"r_level": self.r_level, "v_level": self.v_level, "domain": self.domain, "task_type": self.task_type}

    def to_record(self) -> dict:
        return {
            "case_id": self.case_id,
            "prompt": self.prompt,
            "ground_truth": self.ground_truth,
            "answer_kind": self.answer_kind,
            "options": self.options,
            "tags": self.tags,
            "doc_seed": self.doc_seed,
            "case_seed": self.case_seed,
            "meta": self.meta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> TaskCase:
        tags = rec["tags"]
        return cls(
            case_id=rec["case_id"],
            prompt=rec["prompt"],
            ground_truth=rec["ground_truth"],
            answer_kind=rec["answer_kind"],
            r_level=tags["r_level"],
            v_level=tags["v_level"],
            domain=tags["domain"],
            task_type=tags["task_type"],
            doc_seed=int(rec["doc_seed"]),
            case_seed=int(rec.get("case_seed", 0)),
            options=rec.get("options", ""),
            meta=rec.get("meta", {}),
        )


def make_case(
    r_level: str,
    doc: str,
    ann: Annotations,
    case_seed: int,
    *,
    v_level: str = "",
    domain: str = "",
    doc_seed: int = 0,
    case_id: str = "",
) -> TaskCase:
    if r_level not in R_LEVELS:
        raise ValidationError(f"unknown reasoning level {r_level!r}")
    rng = np.random.default_rng(int(case_seed))
    common = dict(
        case_id=case_id,
        r_level=r_level,
        v_level=v_level,
        domain=domain,
        task_type=TASK_TYPES[r_level],
        doc_seed=int(doc_seed),
        case_seed=int(case_seed),
    )
    if r_level == "R0":
        return TaskCase(prompt=f"{doc}#txt>", ground_truth=canonical_linearization(ann), answer_kind="free_text",
                        **common)
    if not ann.fields:
        ann = augment_positional(ann)
    keys = list(ann.fields)
    if r_level == "R1":
        key = keys[int(rng.integers(len(keys)))]
        return TaskCase(prompt=f"{doc}#{key}>", ground_truth=ann.fields[key], answer_kind="free_text",
                        meta={"key": key}, **common)
    a, b = (keys[i] for i in rng.choice(len(keys), size=2, replace=False))
    pool = [k for k in keys if k not in (a, b)]
    if not pool:
        pool = [k for k in DOMAINS[domain].keys if k not in (a, b)] if domain in DOMAINS else ["zz"]
    distractor = pool[int(rng.integers(len(pool)))]
    option_keys = [a, b, distractor]
    perm = rng.permutation(len(option_keys))
    option_keys = [option_keys[i] for i in perm]
    winner = a if int(ann.fields[a]) > int(ann.fields[b]) else b
    letter = OPTION_LETTERS[option_keys.index(winner)]
    listing = "|".join(f"{OPTION_LETTERS[i]} {k}" for i, k in enumerate(option_keys))
    return TaskCase(
        prompt=f"{doc}#max {a} {b}|{listing}>",
        ground_truth=letter,
        answer_kind="choice",
        options=OPTION_LETTERS[: len(option_keys)],
        meta={"compare": [a, b], "option_keys": option_keys},
        **common,
    )


def parse_cell(cell: str) -> tuple[str, str]:
    r, v = cell[:2], cell[2:]
    if r not in R_LEVELS or v not in V_LEVELS:
        raise ValidationError(f"bad grid cell {cell!r}; expected like 'R1V2'")
    return r, v


def _apportion(total: int, weights: dict[str, float]) -> list[str]:
    """Largest-remainder split of ``total`` items over named weights."""
    names = list(weights)
    w = np.array([weights[n] for n in names], dtype=float)
    raw = w / w.sum() * total
    base = np.floor(raw).astype(int)
    rest = total - int(base.sum())
    order = sorted(range(len(names)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return [n for n, c in zip(names, base) for _ in range(c)]


@dataclass
class TaskSuite:
    cases: list[TaskCase]
    train_ids: list[str]
    eval_ids: list[str]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def by_id(self) -> dict[str, TaskCase]:
        return {c.case_id: c for c in self.cases}

    def train_cases(self) -> list[TaskCase]:
        ids = set(self.train_ids)
        return [c for c in self.cases if c.case_id in ids]

    def eval_cases(self) -> list[TaskCase]:
        ids = set(self.eval_ids)
        return [c for c in self.cases if c.case_id in ids]

    def cell_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.cases:
            out[c.r_level + c.v_level] = out.get(c.r_level + c.v_level, 0) + 1
        return out

    def filter(self, **tags) -> list[TaskCase]:
        return [c for c in self.cases if all(c.tags[k] == v for k, v in tags.items())]

    def manifest(self) -> dict:
        return {"config": self.config, "seed": self.seed, "train": self.train_ids, "eval": self.eval_ids}

    def to_ndjson(self) -> str:
        return "".join(json.dumps(c.to_record(), sort_keys=True) + "\n" for c in self.cases)

    def save(self, path, manifest_path=None) -> None:
        path = Path(path)
        path.write_text(self.to_ndjson(), encoding="utf-8")
        manifest_path = Path(manifest_path) if manifest_path else path.with_suffix(".manifest.json")
        manifest_path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, manifest_path=None) -> TaskSuite:
        path = Path(path)
        manifest_path = Path(manifest_path) if manifest_path else path.with_suffix(".manifest.json")
        try:
            cases = [TaskCase.from_record(json.loads(line)) for line in path.read_text("utf-8").splitlines() if line]
            man = json.loads(manifest_path.read_text("utf-8"))
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed suite {path}: {exc}") from None
        return cls(cases, man["train"], man["eval"], man.get("config", {}), man.get("seed", 0))


def gen_suite(
    counts: dict[str, int],
    domains: dict[str, float] | list[str] | tuple[str, ...] = ("gazette",),
    seed: int = 0,
    eval_fraction: float = 0.2,
    max_prompt_len: int | None = None,
) -> TaskSuite:
    """Generate cases cell by cell and split them by document.

    ``counts`` maps grid cells such as ``"R1V2"`` to case counts; ``domains``
    is either a list (equal weights) or name -> mixture weight. Each cell's
    cases are divided among domains by largest remainder, and each cell is
    split train/eval separately so both sides cover the grid.
    """
    if isinstance(domains, (list, tuple)):
        domains = {d: 1.0 for d in domains}
    for d in domains:
        if d not in DOMAINS:
            raise ValidationError(f"unknown domain {d!r}")
    if any(c < 0 for c in counts.values()):
        raise ValidationError("counts must be >= 0")
    if sum(counts.values()) == 0:
        raise ValidationError("all cell counts are zero")
    if not 0.0 <= eval_fraction < 1.0:
        raise ValidationError("eval_fraction must be in [0, 1)")
    cells = sorted((parse_cell(c), n) for c, n in counts.items())
    cases: list[TaskCase] = []
    train_ids: list[str] = []
    eval_ids: list[str] = []
    seen_docs: set[int] = set()
    for (r, v), n in cells:
        if n == 0:
            continue
        assigned = _apportion(n, domains)
        cell_cases = []
        for i, dom in enumerate(assigned):
            doc_seed = _stable_int("doc-seed", seed, r, v, dom, i)
            while doc_seed in seen_docs:
                doc_seed = _stable_int("doc-seed-retry", doc_seed)
            seen_docs.add(doc_seed)
            doc, ann = render_document(v, dom, doc_seed)
            case = make_case(r, doc, ann, _stable_int("case-seed", doc_seed), v_level=v, domain=dom,
                             doc_seed=doc_seed, case_id=f"{dom}-{r}{v}-{i:04d}")
            if max_prompt_len is not None and len(case.prompt) > max_prompt_len:
                raise ValidationError(f"case {case.case_id} prompt exceeds {max_prompt_len} characters")
            cell_cases.append(case)
        perm = _rng("split", seed, r, v).permutation(len(cell_cases))
        n_eval = int(np.floor(eval_fraction * len(cell_cases) + 0.5))
        eval_ids += [cell_cases[j].case_id for j in sorted(perm[:n_eval])]
        train_ids += [cell_cases[j].case_id for j in sorted(perm[n_eval:])]
        cases += cell_cases
    config = {"counts": dict(sorted(counts.items())), "domains": dict(domains), "eval_fraction": eval_fraction}
    return TaskSuite(cases, train_ids, eval_ids, config, seed)


def uniform_counts(per_cell: int) -> dict[str, int]:
    return {r + v: per_cell for r in R_LEVELS for v in V_LEVELS}


def check_vocab(cases) -> None:
    for c in cases:
        vocab.encode(c.prompt + c.ground_truth)
