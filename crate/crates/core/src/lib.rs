//! Offline-first electronic health records for facilities with intermittent
//! connectivity, with a USSD path for feature phones.

pub mod analytics;
pub mod audit;
pub mod auth;
pub mod config;
pub mod entropy;
pub mod event;
pub mod hlc;
pub mod model;
pub mod netsim;
pub mod persist;
pub mod seed;
pub mod service;
pub mod store;
pub mod sync;
pub mod ussd;
pub mod view;
pub mod web;
