"""End-to-end experiment steps over one configuration.

Every artifact lands under the output directory and is recorded in
``manifest.json`` with the config hash, the seed and its sha256. A step whose
artifact exists with a matching manifest entry is skipped, which makes the
pipeline resumable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from functools import cached_property
from pathlib import Path

import httpx

from . import data
from .annotation import (
    automatic_annotate,
    ingest_human,
    llm_annotate,
    needs_ptkb_subset,
    overlap_stats,
    write_impact_audit,
)
from .config import ExperimentConfig
from .data import AnnotationSet, AnnotationSource, Conversation, ConversationTurn, Ptkb, Run
from .errors import ConfigError, MissingArtifactError, Unassessed, ValidationError
from .evaluation import MetricReport, compare_methods, evaluate_run, metric_label, metric_value, write_report
from .llm import ChatClient, TemplateLibrary
from .reformulation import (
    Reformulator,
    RetrieverKind,
    Strategy,
    assemble_search_query,
    build_demonstrations,
    parse_reformulations,
    write_reformulations,
)
from .retrieval import (
    EmbeddingClient,
    EmbeddingStore,
    build_index,
    dump_index,
    load_index,
    load_store,
    search_dense,
    search_sparse,
    write_vectors,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def run_tag(strategy: str, shots: int, retriever: str) -> str:
    return f"{strategy}-{shots}-{retriever}"


def parse_tag(tag: str) -> tuple[str, int | None, str | None]:
    parts = tag.rsplit("-", 2)
    if len(parts) == 3 and parts[1].isdigit():
        return parts[0], int(parts[1]), parts[2]
    return tag, None, None


def atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Experiment:
    """Lazily loads inputs and clients for a config; one method per CLI command."""

    def __init__(
        self,
        config: ExperimentConfig,
        chat_transport: httpx.BaseTransport | None = None,
        embed_transport: httpx.BaseTransport | None = None,
    ):
        config.validate_paths()
        self.config = config
        self.out = config.output_dir
        self._chat_transport = chat_transport
        self._embed_transport = embed_transport
        manifest_path = self.out / MANIFEST
        self.manifest: dict[str, dict] = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        self.written: list[str] = []
        self.skipped: list[str] = []

    # ------------------------------------------------------------------
    # inputs and clients

    @cached_property
    def conversations(self) -> list[Conversation]:
        return data.parse_topics(self.config.resolve(self.config.paths.topics).read_bytes())

    @cached_property
    def qrels(self) -> data.Qrels:
        return data.parse_qrels(self.config.resolve(self.config.paths.qrels).read_bytes())

    @cached_property
    def train_conversations(self) -> list[Conversation]:
        if not self.config.paths.train_topics:
            raise ConfigError("paths.train_topics is required for few-shot demonstrations")
        return data.parse_topics(self.config.resolve(self.config.paths.train_topics).read_bytes())

    @cached_property
    def turns(self) -> list[tuple[Conversation, ConversationTurn]]:
        pairs = [(c, t) for c in self.conversations for t in c.turns]
        if self.config.grid.assessed_only:
            pairs = [(c, t) for c, t in pairs if t.turn_id in self.qrels]
        return pairs

    @cached_property
    def templates(self) -> TemplateLibrary:
        d = self.config.paths.templates_dir
        return TemplateLibrary(self.config.resolve(d) if d else None)

    @cached_property
    def chat_client(self) -> ChatClient:
        g = self.config.gateway
        return ChatClient(
            g.endpoint,
            g.model,
            cache_path=self.config.cache_dir / "chat.jsonl",
            api_key=self.config.api_key,
            temperature=g.temperature,
            max_tokens=g.max_tokens,
            retries=g.retries,
            backoff=g.backoff,
            parallelism=g.parallelism,
            transport=self._chat_transport,
        )

    @cached_property
    def embed_client(self) -> EmbeddingClient:
        e = self.config.embedding
        return EmbeddingClient(
            e.endpoint,
            e.model,
            cache_path=self.config.cache_dir / "embeddings.jsonl",
            api_key=self.config.api_key,
            retries=e.retries,
            backoff=e.backoff,
            batch_size=e.batch_size,
            parallelism=e.parallelism,
            transport=self._embed_transport,
        )

    @cached_property
    def reformulator(self) -> Reformulator:
        g = self.config.gateway
        return Reformulator(self.chat_client, self.templates, g.retry_budget, g.include_responses)

    def _map(self, fn: Callable, items: Sequence) -> list:
        workers = max(1, self.config.gateway.parallelism)
        if workers == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))

    # ------------------------------------------------------------------
    # artifacts

    def _meta(self) -> dict:
        return {"config": self.config.hash, "seed": self.config.seed}

    def _fresh(self, rel: str) -> bool:
        path = self.out / rel
        entry = self.manifest.get(rel)
        if not path.exists() or entry is None or entry.get("config") != self.config.hash:
            return False
        return entry.get("sha256") == hashlib.sha256(path.read_bytes()).hexdigest()

    def _write(self, rel: str, payload: bytes) -> Path:
        path = self.out / rel
        digest = hashlib.sha256(payload).hexdigest()
        if self._fresh(rel) and self.manifest[rel]["sha256"] == digest:
            self.skipped.append(rel)
            return path
        atomic_write(path, payload)
        self.manifest[rel] = {**self._meta(), "sha256": digest}
        manifest = json.dumps(dict(sorted(self.manifest.items())), indent=2, sort_keys=True) + "\n"
        atomic_write(self.out / MANIFEST, manifest.encode("utf-8"))
        self.written.append(rel)
        logger.info("wrote %s", path)
        return path

    def _skip(self, rel: str) -> bool:
        if self._fresh(rel):
            self.skipped.append(rel)
            logger.info("up to date: %s", rel)
            return True
        return False

    def _require(self, rel: str, command: str) -> Path:
        path = self.out / rel
        if not path.exists():
            raise MissingArtifactError(str(path), command)
        return path

    # ------------------------------------------------------------------
    # index / embed

    INDEX = "index/bm25.idx"
    VECTORS = "index/doc_vectors.tsv"

    def _documents(self):
        return data.parse_collection(self.config.resolve(self.config.paths.collection).read_bytes())

    def cmd_index(self, force: bool = False) -> Path:
        if not force and self._skip(self.INDEX):
            return self.out / self.INDEX
        index = build_index(self._documents(), stem=self.config.retriever.stemming)
        return self._write(self.INDEX, dump_index(index))

    def cmd_embed(self, force: bool = False) -> Path:
        if self.config.paths.vectors:
            path = self.config.resolve(self.config.paths.vectors)
            logger.info("using precomputed vectors %s", path)
            return path
        if not force and self._skip(self.VECTORS):
            return self.out / self.VECTORS
        docs = list(self._documents())
        vectors = self.embed_client.embed_texts([d.text for d in docs])
        dim = self.config.retriever.dense_dimension
        if dim is not None and vectors and len(vectors[0]) != dim:
            raise ValidationError(f"embeddings have dimension {len(vectors[0])}, config says {dim}")
        return self._write(self.VECTORS, write_vectors({d.doc_id: v for d, v in zip(docs, vectors)}))

    @cached_property
    def index(self):
        return load_index(self._require(self.INDEX, "index"))

    @cached_property
    def store(self) -> EmbeddingStore:
        if self.config.paths.vectors:
            return load_store(self.config.resolve(self.config.paths.vectors))
        return load_store(self._require(self.VECTORS, "embed"))

    def searcher(self, kind: RetrieverKind | str) -> Callable[[str], list[tuple[str, float]]]:
        kind = RetrieverKind(kind)
        r = self.config.retriever
        if kind is RetrieverKind.SPARSE:
            index = self.index
            return lambda q: search_sparse(index, q, r.depth, r.k1, r.b)
        store = self.store
        return lambda q: search_dense(store, self.embed_client.embed_texts([q])[0], r.depth)

    # ------------------------------------------------------------------
    # annotate

    @staticmethod
    def annotation_path(source: str, split: str = "test") -> str:
        return f"annotations/{source}.tsv" if split == "test" else f"annotations/{split}-{source}.tsv"

    def cmd_annotate(self, source: str, split: str = "test", force: bool = False) -> Path:
        source = AnnotationSource(source)
        rel = self.annotation_path(source.value, split)
        if not force and self._skip(rel):
            return self.out / rel
        if split == "train":
            if source is not AnnotationSource.AUTOMATIC:
                raise ConfigError("only automatic annotation runs on the training split")
            if not self.config.paths.train_qrels:
                raise ConfigError("paths.train_qrels is required to annotate the training split")
            convs = self.train_conversations
            qrels = data.parse_qrels(self.config.resolve(self.config.paths.train_qrels).read_bytes())
        else:
            convs, qrels = self.conversations, self.qrels

        if source is AnnotationSource.HUMAN:
            return self._write(rel, data.write_annotations(ingest_human(convs)))

        if source is AnnotationSource.LLM:
            pairs = [(c, t) for c, t in self.turns]
            g = self.config.gateway

            def one(pair):
                c, t = pair
                return llm_annotate(
                    self.chat_client, t, c.history(t.turn_id), c.ptkb, self.templates, g.retry_budget, g.include_responses
                )

            results = self._map(one, pairs)
            annotations = AnnotationSet(
                AnnotationSource.LLM,
                {t.turn_id: keys for (_, t), (keys, _) in zip(pairs, results)},
                {t.turn_id: flags for (_, t), (_, flags) in zip(pairs, results) if flags},
            )
            return self._write(rel, data.write_annotations(annotations))

        annotations, records = self._automatic(convs, qrels)
        audit_rel = rel.replace(".tsv", "-impact.tsv")
        self._write(audit_rel, write_impact_audit(records))
        return self._write(rel, data.write_annotations(annotations))

    def _automatic(self, convs: list[Conversation], qrels: data.Qrels):
        kind = RetrieverKind(self.config.annotation.retriever)
        search = self.searcher(kind)
        metric_name = self.config.annotation.metric
        threshold = self.config.metrics.threshold
        pairs = [(c, t) for c in convs for t in c.turns if t.turn_id in qrels]

        def one(pair):
            c, t = pair
            history = c.history(t.turn_id)

            def query_for(subset: Ptkb) -> str:
                rq = self.reformulator.reformulate_selected(t, history, subset, (), Strategy.AUTOMATIC)
                return assemble_search_query(rq, kind)

            try:
                return automatic_annotate(
                    t,
                    c.ptkb,
                    query_for,
                    lambda q: [d for d, _ in search(q)],
                    qrels.for_turn(t.turn_id),
                    lambda ranking, judged: metric_value(metric_name, ranking, judged, threshold),
                )
            except Unassessed:
                return None

        results = self._map(one, pairs)
        selections, records = {}, []
        for (_, t), res in zip(pairs, results):
            if res is None:
                continue
            selections[t.turn_id] = res[0]
            records.extend(res[1])
        return AnnotationSet(AnnotationSource.AUTOMATIC, selections), records

    def load_annotations(self, source: str, split: str = "test") -> AnnotationSet:
        rel = self.annotation_path(source, split)
        hint = f"annotate --source {source}" + (" --split train" if split != "test" else "")
        convs = self.conversations if split == "test" else self.train_conversations
        return data.parse_annotations(self._require(rel, hint).read_bytes(), convs)

    # ------------------------------------------------------------------
    # reformulate / retrieve

    @staticmethod
    def reformulation_path(strategy: str, shots: int) -> str:
        return f"reformulations/{strategy}-{shots}.jsonl"

    def demonstrations(self, shots: int):
        if shots == 0:
            return []
        if self.config.paths.train_annotations:
            ann = data.parse_annotations(
                self.config.resolve(self.config.paths.train_annotations).read_bytes(), self.train_conversations
            )
        else:
            ann = self.load_annotations("automatic", split="train")
        return build_demonstrations(
            self.train_conversations, ann, shots, self.config.seed, self.config.gateway.include_responses
        )

    def cmd_reformulate(self, strategy: str, shots: int, force: bool = False) -> Path:
        strategy = Strategy(strategy)
        rel = self.reformulation_path(strategy.value, shots)
        if not force and self._skip(rel):
            return self.out / rel
        annotations = self.load_annotations(strategy.annotation_source) if strategy.annotation_source else None
        demos = self.demonstrations(shots)

        def one(pair):
            c, t = pair
            return self.reformulator.reformulate(strategy, c, t, demos, annotations)

        queries = self._map(one, self.turns)
        return self._write(rel, write_reformulations(queries))

    @staticmethod
    def run_path(tag: str) -> str:
        return f"runs/{tag}.run"

    def cmd_retrieve(
        self, strategy: str, shots: int, retriever: str, reformulations: Path | None = None, force: bool = False
    ) -> Path:
        kind = RetrieverKind(retriever)
        tag = run_tag(Strategy(strategy).value, shots, kind.value)
        rel = self.run_path(tag)
        if not force and self._skip(rel):
            return self.out / rel
        source = reformulations or self._require(
            self.reformulation_path(strategy, shots), f"reformulate --strategy {strategy} --shots {shots}"
        )
        queries = parse_reformulations(Path(source).read_bytes())
        if kind is RetrieverKind.DENSE:
            # one batched pass keeps embedding calls few and the cache order stable
            self.embed_client.embed_texts([assemble_search_query(rq, kind) for rq in queries])
        search = self.searcher(kind)
        rankings = self._map(lambda rq: search(assemble_search_query(rq, kind)), queries)
        run = Run(tag, {rq.turn_id: ranking for rq, ranking in zip(queries, rankings) if ranking})
        return self._write(rel, data.write_run(run, self.config.retriever.depth))

    # ------------------------------------------------------------------
    # evaluate

    def grid_tags(self) -> list[str]:
        g = self.config.grid
        return [run_tag(s, k, r) for r in g.retrievers for s in g.strategies for k in g.shots]

    def subset_turns(self) -> set[str]:
        automatic = self.load_annotations("automatic")
        return needs_ptkb_subset(automatic, self.qrels.turn_ids())

    def cmd_evaluate(self, run_files: Iterable[Path] | None = None, subset: bool | None = None) -> dict[str, Path]:
        """Per-run reports, a summary, comparison tables per retriever, and plot data."""
        subset = self.config.metrics.subset if subset is None else subset
        if run_files is None:
            run_files = [self._require(self.run_path(t), "retrieve") for t in self.grid_tags()]
        runs = [data.parse_run(Path(p).read_bytes()) for p in run_files]
        mconf = self.config.metrics.to_metric_config()
        g, a = self.config.gateway, self.config.annotation
        meta = {
            **self._meta(),
            "threshold": mconf.threshold,
            # temperature 0 rather than the provider default, for replayable runs
            "model": f"{g.model} temperature={g.temperature}",
            "automatic labels": f"{a.metric} on {a.retriever}, single-sentence strict gain",
        }

        scopes: dict[str, set[str] | None] = {"whole": None}
        if subset:
            turns = self.subset_turns()
            if turns:
                scopes["subset"] = turns
            else:
                logger.warning("no turn needs PTKB under the automatic annotation; skipping subset evaluation")

        outputs: dict[str, Path] = {}
        summary_rows = []
        plot_rows = []
        for scope, turn_filter in scopes.items():
            by_retriever: dict[str, dict[str, MetricReport]] = {}
            for run in runs:
                report = evaluate_run(run, self.qrels, mconf, turn_filter)
                prefix = "reports" if scope == "whole" else "reports/subset"
                outputs[f"{scope}:{run.tag}"] = self._write(
                    f"{prefix}/{run.tag}.tsv", write_report(report, {**meta, "run": run.tag, "scope": scope})
                )
                strategy, shots, retriever = parse_tag(run.tag)
                method = strategy if shots is None else f"{strategy}-{shots}"
                by_retriever.setdefault(retriever or "-", {})[method] = report
                summary_rows.append(
                    [scope, retriever or "-", strategy, "-" if shots is None else str(shots)]
                    + [report.rendered(m) for m in mconf.metrics]
                )
                for m in mconf.metrics:
                    plot_rows.append(f"{scope}\t{retriever or '-'}\t{method}\t{m}\t{report.rendered(m)}\n")
            for retriever, reports in by_retriever.items():
                baseline = "none-0" if "none-0" in reports else None
                table = compare_methods(reports, baseline, mconf.metrics)
                stem = f"reports/comparison-{retriever}-{scope}"
                self._write(f"{stem}.json", table.to_json().encode())
                title = f"# {retriever} / {scope} ({table.turn_count} turns)\n\n"
                outputs[f"comparison:{retriever}:{scope}"] = self._write(
                    f"{stem}.md", (title + table.to_markdown()).encode()
                )

        header = "\t".join(["scope", "retriever", "strategy", "shots", *(metric_label(m) for m in mconf.metrics)])
        lines = [f"# config: {self.config.hash}\n# seed: {self.config.seed}\n", header + "\n"]
        lines += ["\t".join(r) + "\n" for r in summary_rows]
        outputs["summary"] = self._write("reports/summary.tsv", "".join(lines).encode())
        plot = "scope\tretriever\tmethod\tmetric\tvalue\n" + "".join(plot_rows)
        outputs["plot_aggregates"] = self._write("reports/plot_aggregates.tsv", plot.encode())
        overlap = self._overlap_rows()
        if overlap:
            outputs["plot_overlap"] = self._write("reports/plot_overlap.tsv", overlap.encode())
        return outputs

    def _overlap_rows(self) -> str:
        available = {}
        for source in AnnotationSource:
            if (self.out / self.annotation_path(source.value)).exists():
                available[source.value] = self.load_annotations(source.value)
        if len(available) < 2:
            return ""
        turns = self.qrels.turn_ids()
        ptkbs = {t.turn_id: c.ptkb for c in self.conversations for t in c.turns}
        names = list(available)
        lines = ["pair\tfield\tvalue\n"]
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                report = overlap_stats(available[a], available[b], turns, ptkbs)
                pair = f"{a}-{b}"
                lines += [f"{pair}\t{k}\t{v}\n" for k, v in report.rows()[1:]]
        return "".join(lines)

    # ------------------------------------------------------------------
    # stats / pipeline

    def cmd_stats(self) -> dict[str, data.DatasetStats]:
        judgments = None
        if self.config.paths.ptkb_judgments:
            judgments = data.parse_qrels(self.config.resolve(self.config.paths.ptkb_judgments).read_bytes())
        out = {"test": data.dataset_stats(self.conversations, self.qrels, judgments)}
        if self.config.paths.train_topics:
            train_qrels = None
            if self.config.paths.train_qrels:
                train_qrels = data.parse_qrels(self.config.resolve(self.config.paths.train_qrels).read_bytes())
            out["train"] = data.dataset_stats(self.train_conversations, train_qrels)
        return out

    def cmd_pipeline(self) -> dict[str, Path]:
        g = self.config.grid
        strategies = [Strategy(s) for s in g.strategies]
        kinds = {RetrieverKind(r) for r in g.retrievers}
        sources = {s.annotation_source for s in strategies if s.annotation_source}
        if self.config.metrics.subset:
            sources.add("automatic")
        needs_train = any(k > 0 for k in g.shots) and not self.config.paths.train_annotations
        annotation_kind = RetrieverKind(self.config.annotation.retriever)
        if "automatic" in sources or needs_train:
            kinds.add(annotation_kind)

        if RetrieverKind.SPARSE in kinds:
            self.cmd_index()
        if RetrieverKind.DENSE in kinds:
            self.cmd_embed()
        for source in sorted(sources):
            self.cmd_annotate(source)
        if needs_train:
            self.cmd_annotate("automatic", split="train")
        for s in strategies:
            for k in g.shots:
                self.cmd_reformulate(s.value, k)
        for r in g.retrievers:
            for s in strategies:
                for k in g.shots:
                    self.cmd_retrieve(s.value, k, r)
        return self.cmd_evaluate()
