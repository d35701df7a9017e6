import dataclasses
from collections import OrderedDict
from threading import RLock
from typing import Callable, Hashable, Optional

from attention import GraphStructure, build_structure
from config import settings
from graph import Graph, add_virtual_node, focal_mask, hop_matrix

CacheEntry = tuple[Graph, GraphStructure]


class StructureCache:
    """In-memory LRU cache of per-graph layer inputs.

    Hops, buckets and edge types are stored once per graph; each focal length
    adds an entry that shares those arrays and carries only its own mask.
    """

    def __init__(self, max_items: int = settings.structure_cache_max_items):
        self._max_items = max_items
        self._store: OrderedDict[Hashable, CacheEntry] = OrderedDict()
        self._lock = RLock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)

    def get(self, key: Hashable) -> Optional[CacheEntry]:
        with self._lock:
            entry = self._store.get(key)
            if entry is None:
                return None

            # Mark as recently used
            self._store.move_to_end(key)
            return entry

    def set(self, key: Hashable, value: CacheEntry):
        with self._lock:
            graph, structure = value
            if not isinstance(graph, Graph) or not isinstance(structure, GraphStructure):
                raise TypeError("StructureCache values must be (Graph, GraphStructure) pairs.")

            self._store[key] = value
            self._store.move_to_end(key)

            while len(self._store) > self._max_items:
                self._store.popitem(last=False)

    def clear(self):
        with self._lock:
            self._store.clear()
            self.hits = 0
            self.misses = 0

    def get_or_build(self, key: Hashable, build: Callable[[], CacheEntry]) -> CacheEntry:
        with self._lock:
            cached = self.get(key)
            if cached is not None:
                self.hits += 1
                return cached
            self.misses += 1
        # Two threads may build the same entry concurrently; both results are identical.
        value = build()
        self.set(key, value)
        return value

    def base_structure_for(
        self,
        graph: Graph,
        max_hop: int,
        virtual_feature_id: int | None = None,
    ) -> CacheEntry:
        """Mask-free layer inputs for `graph`, shared by every focal length.

        With `virtual_feature_id` set, the graph is augmented with a virtual
        node carrying that feature id and the augmented graph is returned.
        """

        key = (graph.fingerprint(), max_hop, virtual_feature_id)

        def build() -> CacheEntry:
            target, hops = graph, hop_matrix(graph)
            if virtual_feature_id is not None:
                target, hops = add_virtual_node(graph, hops, virtual_feature_id)
            return target, build_structure(target, hops, None, max_hop)

        return self.get_or_build(key, build)

    def structure_for(
        self,
        graph: Graph,
        fl: int | None,
        max_hop: int,
        virtual_feature_id: int | None = None,
    ) -> CacheEntry:
        """Layer inputs for `graph` at focal length `fl`."""

        if fl is None:
            return self.base_structure_for(graph, max_hop, virtual_feature_id)

        key = (graph.fingerprint(), max_hop, virtual_feature_id, "fl", fl)

        def build() -> CacheEntry:
            target, base = self.base_structure_for(graph, max_hop, virtual_feature_id)
            return target, dataclasses.replace(base, mask=focal_mask(base.hops, fl))

        return self.get_or_build(key, build)


structure_cache = StructureCache()
