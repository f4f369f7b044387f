"""Label-tree generation with a chat-completion model.

The model is asked for the same JSON document the hierarchy loader reads,
fenced in a code block.  Replies are validated structurally; failures are
fed back into the next prompt until a tree passes or the iteration budget
runs out.  ``FixtureClient`` replays canned replies from a directory so
nothing here needs the network in tests.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .errors import (
    DataError,
    ExhaustedIterations,
    HierarchyError,
    HttpStatus,
    MalformedResponseBody,
    RateLimited,
    ServiceError,
    Timeout,
)
from .hierarchy import LabelHierarchy, balance_metrics, hierarchy_from_dict

log = logging.getLogger(__name__)

ENDPOINT_ENV = "HIERACT_LLM_ENDPOINT"
KEY_ENV = "HIERACT_LLM_KEY"

CONSTRAINTS = (
    "Distinct hierarchical separation: every level must draw clear semantic boundaries, "
    "so that no category overlaps in meaning with another category of the same level "
    "and no category repeats the meaning of its parent.",
    "Class balance control: keep the number of categories per level, and the number of "
    "children per parent, roughly even; avoid parents with a single child next to parents "
    "with many.",
    "Flexible handling of ambiguous labels: labels that do not belong to one clear group "
    "(for example labels containing 'other' or catch-all terms such as 'clutter') may be "
    "placed in their own group or attached where they fit best, as long as the tree stays clear.",
)

STRUCTURAL_CHECKS = ("Parse", "CoversAllLabels", "NoDuplicates", "CorrectDepth", "TreeShape",
                     "BalanceWithinBounds")


@dataclass(frozen=True)
class TaxonomyPrompt:
    flat_labels: tuple[str, ...]
    target_depth: int
    constraints: tuple[str, ...] = CONSTRAINTS
    iteration: int = 0
    prior_feedback: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "flat_labels", tuple(self.flat_labels))
        if self.target_depth < 2:
            raise DataError("target_depth must be at least 2")
        if not self.flat_labels:
            raise DataError("flat_labels must not be empty")
        if len(set(self.flat_labels)) != len(self.flat_labels):
            raise DataError("flat_labels must be unique")
        if self.iteration < 0:
            raise DataError("iteration must be >= 0")


def render_prompt(p: TaxonomyPrompt) -> str:
    n = p.target_depth
    lines = [
        "You are organizing the semantic classes of a 3D indoor point cloud segmentation "
        f"task into a label tree with exactly {n} levels.",
        "",
        f"Level {n - 1} (the finest level) must contain exactly these {len(p.flat_labels)} "
        "labels, each exactly once:",
    ]
    lines += [f"- {label}" for label in p.flat_labels]
    lines += [
        "",
        f"Create {n - 1} coarser level(s) above them. Level 0 is the coarsest. Every label "
        "below level 0 has exactly one parent in the level directly above it, and every "
        "label above the finest level has at least one child. All names must be unique "
        "across the whole tree.",
        "",
        "Follow these constraints:",
    ]
    lines += [f"{k}. {c}" for k, c in enumerate(p.constraints, 1)]
    lines += [
        "",
        "Answer with a single JSON code block and nothing else, in this shape:",
        "```json",
        '{"levels": [["<level 0 names>"], ["<level 1 names>"], ...], '
        '"parents": {"<child name>": "<parent name>", ...}}',
        "```",
    ]
    if p.iteration > 0 and p.prior_feedback:
        lines += [
            "",
            f"This is revision {p.iteration}. The previous answer was rejected for these reasons:",
            p.prior_feedback,
            "Fix every listed problem.",
        ]
    return "\n".join(lines) + "\n"


# -- transport -------------------------------------------------------------


@dataclass
class EndpointConfig:
    url: str | None = None
    model: str = "gpt-4o"
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 4
    backoff: float = 1.0
    backoff_cap: float = 30.0

    @classmethod
    def from_env(cls, **overrides) -> "EndpointConfig":
        cfg = cls(**overrides)
        if cfg.url is None:
            cfg.url = os.environ.get(ENDPOINT_ENV)
        return cfg


def _redact(text: str, secret: str | None) -> str:
    return text.replace(secret, "***") if secret else text


def _extract_content(resp: httpx.Response) -> str:
    try:
        body = resp.json()
        content = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseBody(f"unexpected response body: {exc!r}") from exc
    if not isinstance(content, str):
        raise MalformedResponseBody("message content is not a string")
    return content


def request_taxonomy(
    prompt: str,
    config: EndpointConfig,
    *,
    api_key: str | None = None,
    transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] = time.sleep,
    stats: dict | None = None,
) -> str:
    """POST one chat-completion request; retry 429 and 5xx with exponential backoff.

    The credential comes from ``api_key`` or the ``HIERACT_LLM_KEY`` environment
    variable and never appears in log output.  ``stats["attempts"]`` receives
    the number of HTTP attempts made.
    """
    if not config.url:
        raise ServiceError(f"no endpoint configured (set {ENDPOINT_ENV})")
    key = api_key if api_key is not None else os.environ.get(KEY_ENV)
    if not key:
        raise ServiceError(f"no credential configured (set {KEY_ENV})")
    payload = {
        "model": config.model,
        "temperature": config.temperature,
        "messages": [{"role": "user", "content": prompt}],
    }
    headers = {"Authorization": f"Bearer {key}"}
    attempts = 0
    with httpx.Client(timeout=config.timeout, transport=transport) as client:
        while True:
            attempts += 1
            if stats is not None:
                stats["attempts"] = attempts
            log.info("llm request %d to %s (auth: Bearer ***, %d prompt chars)",
                     attempts, config.url, len(prompt))
            retry_err: ServiceError
            try:
                resp = client.post(config.url, json=payload, headers=headers)
            except httpx.TimeoutException as exc:
                raise Timeout(f"request to {config.url} timed out") from exc
            except httpx.TransportError as exc:
                raise Timeout(_redact(f"could not reach {config.url}: {exc}", key)) from exc
            log.info("llm response %d: status %d", attempts, resp.status_code)
            if resp.status_code == 200:
                text = _extract_content(resp)
                log.debug("llm response body: %s", _redact(text, key))
                return text
            if resp.status_code == 429:
                retry_err = RateLimited()
            elif resp.status_code >= 500:
                retry_err = HttpStatus(resp.status_code)
            else:
                raise HttpStatus(resp.status_code, _redact(resp.text[:200], key))
            if attempts > config.max_retries:
                raise retry_err
            sleep(min(config.backoff * 2 ** (attempts - 1), config.backoff_cap))


class TaxonomyClient(Protocol):
    requests_made: int

    def __call__(self, prompt: str) -> str: ...


class HttpTaxonomyClient:
    def __init__(self, config: EndpointConfig, **kwargs):
        self.config = config
        self.kwargs = kwargs
        self.requests_made = 0

    def __call__(self, prompt: str) -> str:
        self.requests_made += 1
        return request_taxonomy(prompt, self.config, **self.kwargs)


class FixtureClient:
    """Replays ``*.txt`` / ``*.md`` / ``*.json`` replies from a directory in name order."""

    def __init__(self, directory: str | Path):
        d = Path(directory)
        self.files = sorted(p for p in d.iterdir() if p.suffix in {".txt", ".md", ".json"})
        if not self.files:
            raise DataError(f"no fixture replies in {d}")
        self.requests_made = 0
        self.prompts: list[str] = []

    def __call__(self, prompt: str) -> str:
        if self.requests_made >= len(self.files):
            raise ServiceError("fixture replies exhausted")
        self.prompts.append(prompt)
        text = self.files[self.requests_made].read_text(encoding="utf-8")
        self.requests_made += 1
        return text


# -- validation ------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    message: str = ""
    fatal: bool = True


@dataclass
class TaxonomyCandidate:
    raw_response: str
    parsed: LabelHierarchy | None
    validation: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.validation if c.fatal)

    def failures(self) -> list[str]:
        return [f"{c.name}: {c.message}" for c in self.validation if c.fatal and not c.passed]

    def check(self, name: str) -> Check:
        return next(c for c in self.validation if c.name == name)


_FENCE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\r?\n(.*?)```", re.DOTALL)


def _extract_json(text: str) -> str:
    m = _FENCE.search(text)
    return m.group(1) if m else text


def _load_with_duplicates(blob: str) -> tuple[object, list[str]]:
    dupes: list[str] = []

    def hook(pairs):
        seen = {}
        for k, v in pairs:
            if k in seen:
                dupes.append(k)
            seen[k] = v
        return seen

    return json.loads(blob, object_pairs_hook=hook), dupes


def parse_and_validate(
    raw: str | bytes,
    flat_labels: Sequence[str],
    target_depth: int,
    balance_bound: float = 4.0,
) -> TaxonomyCandidate:
    """Parse a model reply and run every structural check; never raises."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    checks: list[Check] = []
    try:
        doc, dup_keys = _load_with_duplicates(_extract_json(raw))
        if (
            not isinstance(doc, dict)
            or not isinstance(doc.get("levels"), list)
            or not all(isinstance(lv, list) and all(isinstance(x, str) for x in lv)
                       for lv in doc["levels"])
            or not isinstance(doc.get("parents", {}), dict)
        ):
            raise ValueError("reply does not follow the {levels, parents} schema")
    except (ValueError, RecursionError) as exc:
        checks.append(Check("Parse", False, f"could not parse reply: {exc}"))
        for name in STRUCTURAL_CHECKS[1:]:
            checks.append(Check(name, False, "not evaluated: reply did not parse"))
        checks.append(Check("AmbiguousLabelPlacement", True, "not evaluated", fatal=False))
        return TaxonomyCandidate(raw, None, checks)
    checks.append(Check("Parse", True))

    levels: list[list[str]] = doc["levels"]
    parents: dict = doc.get("parents", {})
    wanted = list(flat_labels)
    leaves = levels[-1] if levels else []

    missing = [x for x in wanted if x not in leaves]
    extra = [x for x in leaves if x not in wanted]
    msg = []
    if missing:
        msg.append("missing label(s): " + ", ".join(missing))
    if extra:
        msg.append("unexpected leaf label(s): " + ", ".join(extra))
    checks.append(Check("CoversAllLabels", not msg, "; ".join(msg)))

    counts: dict[str, int] = {}
    for lv in levels:
        for name in lv:
            counts[name] = counts.get(name, 0) + 1
    dup_names = sorted(n for n, c in counts.items() if c > 1)
    msg = []
    if dup_names:
        msg.append("duplicated label(s): " + ", ".join(dup_names))
    if dup_keys:
        msg.append("label(s) with more than one parent: " + ", ".join(sorted(set(dup_keys))))
    checks.append(Check("NoDuplicates", not msg, "; ".join(msg)))

    checks.append(Check(
        "CorrectDepth",
        len(levels) == target_depth,
        "" if len(levels) == target_depth else f"expected {target_depth} levels, got {len(levels)}",
    ))

    tree = None
    try:
        tree = hierarchy_from_dict(doc)
        checks.append(Check("TreeShape", True))
    except HierarchyError as exc:
        checks.append(Check("TreeShape", False, f"{type(exc).__name__}: {exc}"))

    if tree is None:
        checks.append(Check("BalanceWithinBounds", False, "not evaluated: tree is invalid"))
        checks.append(Check("AmbiguousLabelPlacement", True, "not evaluated", fatal=False))
        return TaxonomyCandidate(raw, None, checks)

    report = balance_metrics(tree)
    bad = [
        f"level {lb.level}: {lb.max_children} vs {lb.min_children} children"
        for lb in report.per_level
        if lb.max_children > balance_bound * lb.min_children
    ]
    checks.append(Check(
        "BalanceWithinBounds",
        not bad,
        "" if not bad else f"child counts exceed ratio {balance_bound:g}: " + "; ".join(bad),
    ))

    singles = []
    for nid in (n for ids in tree.levels[1:] for n in ids):
        node = tree.node(nid)
        if "other" in node.name.lower() and len(tree.children(node.parent_id)) == 1:
            singles.append(node.name)
    checks.append(Check(
        "AmbiguousLabelPlacement",
        True,
        ("singleton ambiguous label(s): " + ", ".join(singles)) if singles else "",
        fatal=False,
    ))

    candidate = TaxonomyCandidate(raw, None, checks)
    if candidate.ok:
        candidate.parsed = tree
    return candidate


@dataclass
class RefineResult:
    hierarchy: LabelHierarchy
    iterations: int
    candidates: list[TaxonomyCandidate]


def refine_loop(
    flat_labels: Sequence[str],
    target_depth: int,
    max_iterations: int,
    client: TaxonomyClient,
    balance_bound: float = 4.0,
) -> RefineResult:
    """Prompt, validate, and re-prompt with the failures until a tree passes."""
    if max_iterations < 1:
        raise DataError("max_iterations must be >= 1")
    candidates: list[TaxonomyCandidate] = []
    feedback = None
    for it in range(max_iterations):
        prompt = render_prompt(TaxonomyPrompt(tuple(flat_labels), target_depth,
                                              iteration=it, prior_feedback=feedback))
        cand = parse_and_validate(client(prompt), flat_labels, target_depth, balance_bound)
        candidates.append(cand)
        if cand.ok:
            return RefineResult(cand.parsed, it + 1, candidates)
        feedback = "\n".join(f"- {f}" for f in cand.failures())
        log.info("taxonomy iteration %d rejected: %s", it + 1, "; ".join(cand.failures()))
    raise ExhaustedIterations(
        f"no valid hierarchy after {max_iterations} iteration(s)", candidates[-1].failures()
    )
