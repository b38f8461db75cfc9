#![allow(dead_code)]

pub mod normalization;
pub mod oracles;
