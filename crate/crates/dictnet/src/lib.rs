//! File formats, model persistence and the command-line front end for
//! `dictnet-core`.

pub mod cli;
pub mod data_io;
pub mod model_store;
