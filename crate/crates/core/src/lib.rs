pub mod config;
pub mod corpus;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod retrieval;
pub mod run;
pub mod seqmodel;
pub mod simulator;
