//! Command line tools and the HTTP service for the defect annotation pipeline.

pub mod board;
pub mod commands;
pub mod service;
