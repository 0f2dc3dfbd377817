"""Multi-destination one-sided writes: planning, simulation, and execution.

The package models a collective-communication substrate where a single
source-side operation delivers one buffer to many destinations. Destination
sets ride in the packet as a bitmap, relays replicate recursively along the
forwarding tables, and the payload crosses each link at most once.

Modules:

* ``topology``: nodes, links, forwarding tables, and the standard shapes.
* ``metadata``: destination bitmaps, rank maps, group-count arithmetic.
* ``planning``: transmission trees for multi-destination requests.
* ``netsim``: max-min fair fluid simulator over tree flows.
* ``collectives``: AllGather strategies and MoE token dispatch planners.
* ``runtime``: deterministic actor harness executing the write semantics.
* ``scenario`` / ``cli``: scenario documents and the command-line front end.
"""

from .collectives import (
    AllGatherSpec,
    AlltoAllDispatchSpec,
    RedundancyStats,
    SplitRatio,
    Token,
    compute_split_ratio,
    dispatch_multiwrite,
    dispatch_unicast,
    make_gate,
    plan_allgather,
    plan_dispatch,
    redundancy_stats,
)
from .metadata import (
    DestinationBitmap,
    RankMap,
    binomial,
    binomial_pascal,
    decode,
    encode,
    multicast_group_count,
    payload_overhead,
    restrict,
)
from .netsim import (
    CompletionReport,
    SimParams,
    TreeFlow,
    max_min_allocate,
    operator_latency,
    simulate,
)
from .planning import (
    DestMemoryPair,
    MultiWriteRequest,
    TransmissionTree,
    TreeEdge,
    partition_by_next_hop,
    plan_tree,
    tree_to_json,
    unicast_plan,
)
from .runtime import (
    Barrier,
    ClusterHandle,
    OpHandle,
    Packet,
    init_cluster,
    run_allgather_script,
    run_dispatch_script,
)
from .topology import (
    Link,
    Node,
    Topology,
    build_full_mesh,
    build_star,
    build_two_tier,
    topology_from_json,
    topology_to_json,
)

__version__ = "0.1.0"
