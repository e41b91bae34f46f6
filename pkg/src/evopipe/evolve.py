"""Genetic programming over pipeline trees with NSGA-II survival.

Every random choice draws from a generator seeded by ``(seed, stream,
generation, index)``, and fitness is a pure function of the tree, so a run
is reproducible for any number of evaluation workers.
"""

from __future__ import annotations

import dataclasses
import threading
import time
from collections.abc import Callable, Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from evopipe._log import logger
from evopipe._timing import Deadline
from evopipe.data import Dataset
from evopipe.errors import ConfigError, EvaluationTimeout
from evopipe.operators import (
    NodeKind,
    OperatorInstance,
    OperatorSpec,
    Registry,
    TemplateConstraint,
    default_registry,
    sample_hyperparameters,
    sample_value,
)
from evopipe.pareto import fast_nondominated_sort, select_survivors
from evopipe.pipeline import (
    MAX_DEPTH,
    MAX_NODES,
    SOURCE,
    Node,
    PipelineTree,
    Path,
    canonical_tree_text,
    complexity,
    cross_validate,
    iter_paths,
    node_at,
    replace_subtree,
    validate,
)

_INIT_STREAM = 0
_VARIATION_STREAM = 1

_MUTATIONS = ("resample", "replace", "insert", "shrink")
_INSERTABLE = (NodeKind.SELECTOR, NodeKind.TRANSFORMER, NodeKind.STACK)
_GROW_KINDS = (NodeKind.SELECTOR, NodeKind.TRANSFORMER, NodeKind.UNION, NodeKind.STACK)
# Probability that the grow method stops at a given level is 1 - _GROW_CONTINUE ** level.
_GROW_CONTINUE = 0.7


@dataclass(frozen=True)
class Fitness:
    cv_accuracy: float
    complexity: int
    failed: bool = False


@dataclass(frozen=True)
class Individual:
    tree: PipelineTree
    fitness: Fitness | None = None
    birth_generation: int = 0

    @property
    def evaluated(self) -> Fitness:
        if self.fitness is None:
            raise ValueError("individual has not been evaluated")
        return self.fitness


@dataclass(frozen=True)
class GpConfig:
    registry: Registry = field(default_factory=default_registry)
    population_size: int = 100
    generations: int = 100
    mutation_rate: float = 0.9
    crossover_rate: float = 0.1
    cv_folds: int = 5
    eval_timeout_s: float | None = 60.0
    seed: int = 0
    template: TemplateConstraint | None = None
    single_estimator_mode: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        if self.population_size < 2:
            raise ConfigError("population_size must be at least 2")
        if self.generations < 0:
            raise ConfigError("generations must be non-negative")
        if self.mutation_rate < 0 or self.crossover_rate < 0:
            raise ConfigError("variation rates must be non-negative")
        if self.mutation_rate + self.crossover_rate > 1.0:
            raise ConfigError("mutation_rate + crossover_rate must not exceed 1")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.eval_timeout_s is not None and self.eval_timeout_s <= 0:
            raise ConfigError("eval_timeout_s must be positive")
        if self.template is not None:
            if self.single_estimator_mode:
                raise ConfigError("a template cannot be combined with single-estimator mode")
            if len(self.template.slots) > min(MAX_NODES, MAX_DEPTH):
                raise ConfigError(
                    f"template of {len(self.template.slots)} slots exceeds the depth bound"
                )
            for slot in self.template.slots:
                missing = [n for n in slot.candidates if n not in self.registry]
                if missing or not slot.candidates:
                    raise ConfigError(f"template slot {slot.token!r} is unsatisfiable")


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_accuracy: float
    mean_accuracy: float
    front_size: int
    best_complexity: int
    evaluations: int
    cache_hits: int
    elapsed_s: float


@dataclass(frozen=True)
class EvolutionResult:
    population: tuple[Individual, ...]
    pareto_front: tuple[Individual, ...]
    best: Individual
    log: tuple[GenerationRecord, ...]


ProgressSink = Callable[[GenerationRecord], None]


def _rng(seed: int, stream: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, generation, index])


def _pick(rng: np.random.Generator, items: Sequence[object]) -> int:
    return int(rng.integers(len(items)))


def _sample_unary(
    kind: NodeKind, candidates: Sequence[OperatorSpec], child: Node, rng: np.random.Generator
) -> Node:
    spec = candidates[_pick(rng, candidates)]
    return Node(kind, OperatorInstance(spec.name, sample_hyperparameters(spec, rng)), (child,))


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def _grow(cfg: GpConfig, rng: np.random.Generator, level: int, budget: list[int]) -> Node:
    """Grow the subtree feeding a node that sits at operator depth *level*."""
    if level >= MAX_DEPTH or budget[0] <= 0 or rng.random() >= _GROW_CONTINUE**level:
        return SOURCE
    kinds = [k for k in _GROW_KINDS if k is NodeKind.UNION or cfg.registry.for_node(k)]
    kind = kinds[_pick(rng, kinds)]
    budget[0] -= 1
    if kind is NodeKind.UNION:
        left = _grow(cfg, rng, level + 1, budget)
        right = _grow(cfg, rng, level + 1, budget)
        return Node(kind, None, (left, right))
    child = _grow(cfg, rng, level + 1, budget)
    return _sample_unary(kind, cfg.registry.for_node(kind), child, rng)


def _template_tree(cfg: GpConfig, rng: np.random.Generator) -> PipelineTree:
    assert cfg.template is not None
    node = SOURCE
    for slot in cfg.template.slots:
        candidates = [cfg.registry.get(name) for name in slot.candidates]
        node = _sample_unary(slot.role, candidates, node, rng)
    return PipelineTree(node)


def random_tree(cfg: GpConfig, rng: np.random.Generator) -> PipelineTree:
    """One initial tree in the mode selected by *cfg*."""
    if cfg.template is not None:
        return _template_tree(cfg, rng)
    classifiers = cfg.registry.classifiers
    if cfg.single_estimator_mode:
        return PipelineTree(_sample_unary(NodeKind.CLASSIFIER, classifiers, SOURCE, rng))
    budget = [MAX_NODES - 1]
    child = _grow(cfg, rng, 1, budget)
    return PipelineTree(_sample_unary(NodeKind.CLASSIFIER, classifiers, child, rng))


def init_population(cfg: GpConfig, ds_train: Dataset | None = None) -> list[Individual]:
    """``population_size`` valid, unevaluated trees; deterministic per seed."""
    if not cfg.registry.classifiers:
        raise ConfigError("the registry offers no classifier")
    population = []
    for i in range(cfg.population_size):
        tree = random_tree(cfg, _rng(cfg.seed, _INIT_STREAM, 0, i))
        population.append(Individual(tree, None, 0))
    return population


# ---------------------------------------------------------------------------
# Variation
# ---------------------------------------------------------------------------


def _candidates_at(cfg: GpConfig, tree: PipelineTree, path: Path) -> list[OperatorSpec]:
    node = node_at(tree, path)
    if cfg.template is not None:
        slot = cfg.template.slots[len(cfg.template.slots) - 1 - len(path)]
        return [cfg.registry.get(name) for name in slot.candidates]
    if node.kind is NodeKind.CLASSIFIER:
        return list(cfg.registry.classifiers)
    return list(cfg.registry.for_node(node.kind))


def _operator_paths(tree: PipelineTree) -> list[Path]:
    return [p for p, n in iter_paths(tree) if n.inst is not None]


def _has_parameters(tree: PipelineTree, path: Path, cfg: GpConfig) -> bool:
    inst = node_at(tree, path).inst
    return inst is not None and bool(cfg.registry.get(inst.spec_name).space)


def _resample(tree: PipelineTree, cfg: GpConfig, rng: np.random.Generator) -> PipelineTree | None:
    paths = [p for p in _operator_paths(tree) if _has_parameters(tree, p, cfg)]
    if not paths:
        return None
    path = paths[_pick(rng, paths)]
    node = node_at(tree, path)
    assert node.inst is not None
    spec = cfg.registry.get(node.inst.spec_name)
    keys = sorted(spec.space)
    key = keys[_pick(rng, keys)]
    hp = dict(node.inst.hp)
    hp[key] = sample_value(spec.space[key], rng)
    new = dataclasses.replace(node, inst=OperatorInstance(spec.name, hp))
    return replace_subtree(tree, path, new)


def _replace_node(
    tree: PipelineTree, cfg: GpConfig, rng: np.random.Generator
) -> PipelineTree | None:
    paths = [p for p in _operator_paths(tree) if _candidates_at(cfg, tree, p)]
    if not paths:
        return None
    path = paths[_pick(rng, paths)]
    node = node_at(tree, path)
    return replace_subtree(
        tree, path, _sample_unary(node.kind, _candidates_at(cfg, tree, path), node.children[0], rng)
    )


def _insert(tree: PipelineTree, cfg: GpConfig, rng: np.random.Generator) -> PipelineTree | None:
    if tree.node_count >= MAX_NODES:
        return None
    kinds = [k for k in _INSERTABLE if cfg.registry.for_node(k)]
    # an edge is named by the path of its lower end; inserting deepens everything below it
    edges = [
        p
        for p, _ in iter_paths(tree)
        if p and len(p) + node_at(tree, p).operator_depth + 1 <= MAX_DEPTH
    ]
    if not kinds or not edges:
        return None
    path = edges[_pick(rng, edges)]
    kind = kinds[_pick(rng, kinds)]
    new = _sample_unary(kind, cfg.registry.for_node(kind), node_at(tree, path), rng)
    return replace_subtree(tree, path, new)


def _shrink(tree: PipelineTree, cfg: GpConfig, rng: np.random.Generator) -> PipelineTree | None:
    paths = [p for p in _operator_paths(tree) if p]
    if not paths:
        return None
    path = paths[_pick(rng, paths)]
    return replace_subtree(tree, path, node_at(tree, path).children[0])


_MUTATORS = {
    "resample": _resample,
    "replace": _replace_node,
    "insert": _insert,
    "shrink": _shrink,
}


def mutate(ind: Individual, cfg: GpConfig, rng_seed: int) -> Individual:
    """Apply exactly one applicable mutation drawn uniformly from the menu.

    Templates and single-estimator mode fix the structure, so only
    hyperparameter resampling and node replacement apply there.
    """
    rng = np.random.default_rng(rng_seed)
    menu = _MUTATIONS if cfg.template is None and not cfg.single_estimator_mode else _MUTATIONS[:2]
    first = menu[_pick(rng, menu)]
    outcomes: dict[str, PipelineTree | None] = {}
    outcomes[first] = _MUTATORS[first](ind.tree, cfg, rng)
    if outcomes[first] is not None:
        return dataclasses.replace(ind, tree=outcomes[first], fitness=None)
    for name in menu:
        if name not in outcomes:
            outcomes[name] = _MUTATORS[name](ind.tree, cfg, rng)
    applicable = [name for name in menu if outcomes[name] is not None]
    if not applicable:
        return dataclasses.replace(ind, fitness=None)
    chosen = applicable[_pick(rng, applicable)]
    return dataclasses.replace(ind, tree=outcomes[chosen], fitness=None)


def crossover(a: Individual, b: Individual, cfg: GpConfig, rng_seed: int) -> Individual:
    """Graft a compatible subtree of *b* into a copy of *a*; falls back to mutating *a*."""
    rng = np.random.default_rng(rng_seed)
    a_paths = [p for p, n in iter_paths(a.tree) if p and n.kind is not NodeKind.SOURCE]
    if a_paths:
        path = a_paths[_pick(rng, a_paths)]
        target = node_at(a.tree, path)
        if cfg.template is not None:
            donors = [p for p, _ in iter_paths(b.tree) if p == path]
        else:
            donors = [p for p, n in iter_paths(b.tree) if p and n.kind is target.kind]
        if donors:
            donor = node_at(b.tree, donors[_pick(rng, donors)])
            child = replace_subtree(a.tree, path, donor)
            if validate(child, cfg.registry) is None:
                return Individual(child, None, a.birth_generation)
    return mutate(a, cfg, int(rng.integers(2**32)))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class FitnessCache:
    """Thread-safe get-or-compute map from canonical tree text to fitness."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, Future[Fitness]] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def get_or_compute(self, key: str, compute: Callable[[], Fitness]) -> Fitness:
        with self._lock:
            future = self._entries.get(key)
            owner = future is None
            if future is None:
                future = Future()
                self._entries[key] = future
                self.misses += 1
            else:
                self.hits += 1
        if owner:
            try:
                future.set_result(compute())
            except BaseException as exc:
                future.set_exception(exc)
                raise
        else:
            logger.debug("Fitness cache hit")
        return future.result()


def _score(tree: PipelineTree, ds_train: Dataset, cfg: GpConfig) -> Fitness:
    size = complexity(tree)
    deadline = Deadline(cfg.eval_timeout_s) if cfg.eval_timeout_s is not None else None
    try:
        outcome = cross_validate(
            tree, ds_train, cfg.cv_folds, cfg.seed, registry=cfg.registry, deadline=deadline
        )
    except EvaluationTimeout as exc:
        logger.warning("Evaluation timed out: %s", exc)
        return Fitness(0.0, size, True)
    if outcome.all_failed:
        logger.warning("Every fold failed for a pipeline of complexity %d", size)
        return Fitness(0.0, size, True)
    return Fitness(outcome.score, size, False)


def evaluate(
    ind: Individual, ds_train: Dataset, cfg: GpConfig, cache: FitnessCache | None = None
) -> Individual:
    """Attach ``(cv accuracy, complexity)``; memoised on the canonical tree text."""
    if cache is None:
        fitness = _score(ind.tree, ds_train, cfg)
    else:
        key = canonical_tree_text(ind.tree)
        fitness = cache.get_or_compute(key, lambda: _score(ind.tree, ds_train, cfg))
    return dataclasses.replace(ind, fitness=fitness)


# ---------------------------------------------------------------------------
# Generation loop
# ---------------------------------------------------------------------------


def _best_index(population: Sequence[Individual]) -> int:
    return min(
        range(len(population)),
        key=lambda i: (-population[i].evaluated.cv_accuracy, population[i].evaluated.complexity, i),
    )


def _record(
    generation: int,
    population: Sequence[Individual],
    evaluations: int,
    cache_hits: int,
    started: float,
) -> GenerationRecord:
    fitnesses = [ind.evaluated for ind in population]
    accuracies = [f.cv_accuracy for f in fitnesses]
    best = population[_best_index(population)].evaluated
    return GenerationRecord(
        generation=generation,
        best_accuracy=max(accuracies),
        mean_accuracy=float(np.mean(accuracies)),
        front_size=len(fast_nondominated_sort(fitnesses)[0]),
        best_complexity=best.complexity,
        evaluations=evaluations,
        cache_hits=cache_hits,
        elapsed_s=time.perf_counter() - started,
    )


def _offspring(
    population: Sequence[Individual], cfg: GpConfig, generation: int, index: int
) -> Individual:
    rng = _rng(cfg.seed, _VARIATION_STREAM, generation, index)
    n = len(population)
    u = rng.random()
    child_seed = int(rng.integers(2**32))
    if u < cfg.mutation_rate:
        child = mutate(population[_pick(rng, population)], cfg, child_seed)
    elif u < cfg.mutation_rate + cfg.crossover_rate:
        i, j = (int(v) for v in rng.choice(n, size=2, replace=False))
        child = crossover(population[i], population[j], cfg, child_seed)
    else:
        child = population[_pick(rng, population)]
    return Individual(child.tree, None, generation)


def run_evolution(
    cfg: GpConfig, ds_train: Dataset, progress_sink: ProgressSink | None = None
) -> EvolutionResult:
    """Evolve ``generations`` rounds of mu+lambda NSGA-II survival."""
    if cfg.cv_folds > ds_train.n_rows:
        raise ConfigError(f"{cfg.cv_folds} folds need at least as many rows, got {ds_train.n_rows}")
    cache = FitnessCache()
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    def evaluate_all(individuals: list[Individual]) -> list[Individual]:
        if pool is None:
            return [evaluate(ind, ds_train, cfg, cache) for ind in individuals]
        return list(pool.map(lambda ind: evaluate(ind, ds_train, cfg, cache), individuals))

    def emit(generation: int, population: list[Individual], hits: int, misses: int) -> None:
        record = _record(
            generation, population, cache.misses - misses, cache.hits - hits, started
        )
        log.append(record)
        logger.info(
            "Generation %d: best %.4f, mean %.4f, front %d, %d evaluations (%d cached)",
            record.generation,
            record.best_accuracy,
            record.mean_accuracy,
            record.front_size,
            record.evaluations,
            record.cache_hits,
        )
        if progress_sink is not None:
            progress_sink(record)

    log: list[GenerationRecord] = []
    started = time.perf_counter()
    try:
        population = evaluate_all(init_population(cfg, ds_train))
        emit(0, population, 0, 0)
        for generation in range(1, cfg.generations + 1):
            hits, misses = cache.hits, cache.misses
            offspring = evaluate_all(
                [_offspring(population, cfg, generation, j) for j in range(cfg.population_size)]
            )
            combined = population + offspring
            keep = select_survivors([ind.evaluated for ind in combined], cfg.population_size)
            population = [combined[i] for i in keep]
            emit(generation, population, hits, misses)
    finally:
        if pool is not None:
            pool.shutdown()

    front = fast_nondominated_sort([ind.evaluated for ind in population])[0]
    return EvolutionResult(
        population=tuple(population),
        pareto_front=tuple(population[i] for i in front),
        best=population[_best_index(population)],
        log=tuple(log),
    )
