//! Command-line front end: run configuration, the train / eval / compare
//! verbs and the dataset fetcher.

pub mod config;
pub mod fetch;
pub mod run;
