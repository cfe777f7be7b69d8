"""fgopt: divide / optimize / merge toolkit for text-defined agent modules."""

from .core import (EvaluationRecord, EvaluatorKind, MergeNode, Module,
                   ModuleKind, ModuleOrigin, PerformanceStats, Task, TaskSet,
                   ToolSpec, Trajectory, instruction_module, toolset_module,
                   validate_module)
from .llm import (ChatMessage, ChatRequest, ChatResponse, ContextWindowExceeded,
                  FinishReason, HttpBackend, LlmClient, MockBackend, MockRule,
                  RequestTag, TokenLedger, estimate_tokens, mock_backend)
from .merge import (ClusteringMethod, MergeConfig, MergeLeaf, MergeResult,
                    bisecting_kmeans, cluster_count, featurize, kmeans,
                    merge_group, progressive_merge)
from .optimize import (OptimizerConfig, OptimizationResult, Strategy,
                       TrimPolicy, optimize_subset, run_all_at_once,
                       run_batch_wise, run_bootstrapping)
from .orchestrate import (RunConfig, evaluate_module, merge_from_leaves,
                          run_baseline, run_fgo, run_strategy)
from .partition import partition_category, partition_random, verify_partition
from .report import RunReport, StrategyReport, emit_report
from .runtime import (Environment, RolloutConfig, evaluate_exact, evaluate_llm,
                      rollout)
from .ubl import UblEnvironment, load_ubl_tasks, parse_ubl_invoice
from .ruleworld import RuleWorldEnvironment, RuleWorldSpec, build_taskset

__version__ = "0.1.0"
