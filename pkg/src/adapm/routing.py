"""Home-node routing with location caches and forwarding.

Every key has a static home node (``key mod num_nodes``) whose directory
names the node that owns the key or is about to receive it: a relocation
between two nodes other than the home is first announced to the home, which
repoints its directory before the main copy moves. A message therefore reaches
the owner in at most three hops: stale cached target, home, owner.
"""

from __future__ import annotations

import enum
from typing import Dict, Optional, Set


class LocationSource(enum.Enum):
    RELOCATION_NOTICE = "relocation_notice"
    SYNC_RESPONSE = "sync_response"
    REMOTE_ACCESS_RESPONSE = "remote_access_response"


def home_node(key: int, num_nodes: int) -> int:
    if num_nodes < 1:
        raise ValueError("need at least one node")
    return int(key) % num_nodes


class Router:
    """Routing state of one node.

    ``directory`` holds the owner of keys homed here (absent means the home
    itself), ``cache`` holds possibly stale hints for any key, and ``expected``
    lists keys whose main copy the home has announced is on its way here.
    """

    def __init__(self, node: int, num_nodes: int, use_cache: bool = True):
        self.node = node
        self.num_nodes = num_nodes
        self.use_cache = use_cache
        self.directory: Dict[int, int] = {}
        self.cache: Dict[int, int] = {}
        self.expected: Set[int] = set()

    def home(self, key: int) -> int:
        return key % self.num_nodes

    def is_home(self, key: int) -> bool:
        return key % self.num_nodes == self.node

    def directory_owner(self, key: int) -> int:
        # keys nobody relocated yet still live at their home
        return self.directory.get(key, self.node)

    def route_target(self, key: int) -> int:
        """First hop for a message about ``key`` sent from this node."""
        if self.is_home(key):
            return self.directory_owner(key)
        if self.use_cache:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        return key % self.num_nodes

    def forward_target(self, key: int) -> int:
        """Next hop for a message about ``key`` that this non-owner received."""
        if self.is_home(key):
            return self.directory_owner(key)
        return key % self.num_nodes

    def record_location(self, key: int, owner: int,
                        source: LocationSource = LocationSource.SYNC_RESPONSE) -> None:
        if owner == self.node:
            self.cache.pop(key, None)
        elif self.use_cache:
            self.cache[key] = owner

    def set_directory(self, key: int, owner: int) -> None:
        if owner == self.node:
            self.directory.pop(key, None)
        else:
            self.directory[key] = owner


def forward_if_not_owner(router: Router, owns: bool, key: int) -> Optional[int]:
    """``None`` if the message is handled here, else the node to forward to."""
    if owns:
        return None
    return router.forward_target(key)
