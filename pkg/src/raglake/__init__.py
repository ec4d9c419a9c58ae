"""raglake: PDF-to-Markdown RAG workbench over a Bronze/Silver/Gold lakehouse.

Subpackages map one-to-one onto pipeline stages: ``lakehouse`` (layered
store), ``convert`` (PDF -> Markdown), ``transform`` (cleaning passes),
``split`` (chunking), ``index`` (vector store), ``service`` (query API),
``kgraph`` (knowledge graph / GraphRAG), ``bench`` (LLM-as-judge benchmark),
``orchestrate`` (configuration + stage driving).
"""

__version__ = "0.1.0"
