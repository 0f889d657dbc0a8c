"""Desk-scale chunked parameter server.

Keyed float32 models are cut into fixed-size chunks, placed on core
shards by a balanced greedy scheme, served over one or many endpoints,
aggregated synchronously (with an order-independent deterministic mode),
and optionally reduced through an emulated hierarchy of integer-only
rack switches with exact traffic accounting.
"""

__version__ = "0.1.0"

from .aggregation import AggregationBuffer, AggregationMode, OptimizerConfig, PushStatus, apply_sgd
from .assignment import ChunkAssignment, CoreLoad, assign_chunks, shard_keyspace
from .errors import ChunkPSError
from .model import (
    DEFAULT_CHUNK_BYTES,
    ChunkDescriptor,
    ModelSpec,
    ModelStore,
    build_model_spec,
    partition_model,
)
from .server import Deployment, ServerConfig, ServerResult, run_server, serve
from .switch import SwitchModel, Topology, TrafficReport, hierarchical_reduce, quantize, switch_aggregate, traffic_compare
from .wire import AssignmentTable, FrameDecoder, Message, MessageType, decode_message, encode_message
from .worker import (
    SyntheticDataset,
    WorkerConfig,
    WorkerMode,
    WorkerResult,
    logreg_gradient,
    logreg_loss,
    run_worker,
    synthetic_dataset,
    zero_compute_gradients,
)

__all__ = [
    "AggregationBuffer",
    "AggregationMode",
    "AssignmentTable",
    "ChunkAssignment",
    "ChunkDescriptor",
    "ChunkPSError",
    "CoreLoad",
    "DEFAULT_CHUNK_BYTES",
    "Deployment",
    "FrameDecoder",
    "Message",
    "MessageType",
    "ModelSpec",
    "ModelStore",
    "OptimizerConfig",
    "PushStatus",
    "ServerConfig",
    "ServerResult",
    "SwitchModel",
    "SyntheticDataset",
    "Topology",
    "TrafficReport",
    "WorkerConfig",
    "WorkerMode",
    "WorkerResult",
    "apply_sgd",
    "assign_chunks",
    "build_model_spec",
    "decode_message",
    "encode_message",
    "hierarchical_reduce",
    "logreg_gradient",
    "logreg_loss",
    "partition_model",
    "quantize",
    "run_server",
    "run_worker",
    "serve",
    "shard_keyspace",
    "switch_aggregate",
    "synthetic_dataset",
    "traffic_compare",
    "zero_compute_gradients",
]
