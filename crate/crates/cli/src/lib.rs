//! Pipeline commands and Monte-Carlo experiments on top of `bnprepair`.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod summary;
