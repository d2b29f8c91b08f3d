//! Offline task discovery: prompt graph, community detection, summaries and
//! candidate shortlists.

pub mod cluster;
pub mod graph;
pub mod leiden;

pub use cluster::{
    cluster_report, coverage, iterative_cluster, select_candidates, summarize, DiscoveryResult,
    Summary, TaskCluster,
};
pub use graph::{build_graph, PromptGraph};
pub use leiden::{leiden_partition, leiden_traced, modularity};
