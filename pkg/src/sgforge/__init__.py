"""sgforge: layered 3D scene graphs from posed RGB-D frames, annotated through an LLM gateway."""

from .config import ClientConfig, PipelineConfig
from .graph import DescriptionSet, GraphNode, SceneGraph, deserialize, serialize, validate
from .llm import ChatClient, MockFixtureStore, PromptTemplate
from .pipeline import QueryResult, build, evaluate_rooms, export, query

__version__ = "0.1.0"

__all__ = [
    "ChatClient", "ClientConfig", "DescriptionSet", "GraphNode", "MockFixtureStore",
    "PipelineConfig", "PromptTemplate", "QueryResult", "SceneGraph", "build", "deserialize",
    "evaluate_rooms", "export", "query", "serialize", "validate",
]
