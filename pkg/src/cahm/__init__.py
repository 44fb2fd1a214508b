"""Context-augmented hierarchical merging for long-document summarization."""

from .context_selection import (
    CitationParse,
    ContextBundle,
    StrategyConfig,
    bm25_rank,
    cite_select,
    extract_select,
    incorporate_context,
    parse_citations,
    retrieve_select,
)
from .evaluation import RougeReport, rouge
from .llm_backend import BackendConfig, GenRequest, GenResult, HttpBackend, MockBackend, make_backend
from .pipeline import PipelineConfig, RunArtifact, SummaryNode, plan_level, rebuild_tree, run_pipeline
from .prompting import PromptTemplate, TemplateId, label_passages_block, load_templates, render
from .segmentation import (
    Chunk,
    Document,
    Passage,
    TokenizerSpec,
    chunk_document,
    count_tokens,
    split_passages,
    split_sentences,
)

__version__ = "0.1.0"
