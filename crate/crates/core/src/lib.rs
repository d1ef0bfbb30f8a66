pub mod cost_model;
pub mod rng;
pub mod workload;
pub mod kv_manager;
pub mod placement;
pub mod scheduler;
pub mod sim_engine;
pub mod metrics;
pub mod config;
pub mod cli;
