//! Name-keyed registries for interchangeable strategies.
//!
//! Every family of variants (separator values, separator layouts, scan
//! modes, class-token placement) implements a common trait and is looked up
//! here by the name used in config files and on the command line.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use crate::error::{Result, StarError};
use crate::separator::layout::{Cs, Csc, LayoutStrategy, Sc, Scs};
use crate::separator::value::{Embeddings, Identity, Ones, SeparatorValue, Zeros};
use crate::ssm::paths::{FourScan, OneScan, ScanMode};
use crate::training::class_token::{ClassTokenPolicy, Middle, Tail};

/// Something that can be registered under a stable name.
pub trait Named {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, entry: Arc<T>) {
        self.entries.insert(entry.name(), entry);
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        let key = name.trim().to_ascii_lowercase();
        self.entries
            .get(key.as_str())
            .cloned()
            .ok_or_else(|| StarError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

fn separator_values() -> &'static Registry<dyn SeparatorValue> {
    static REG: OnceLock<Registry<dyn SeparatorValue>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg = Registry::<dyn SeparatorValue>::new("separator value");
        reg.register(Arc::new(Zeros));
        reg.register(Arc::new(Ones));
        reg.register(Arc::new(Embeddings));
        reg.register(Arc::new(Identity));
        reg
    })
}

fn layouts() -> &'static Registry<dyn LayoutStrategy> {
    static REG: OnceLock<Registry<dyn LayoutStrategy>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg = Registry::<dyn LayoutStrategy>::new("separator layout");
        reg.register(Arc::new(Sc));
        reg.register(Arc::new(Cs));
        reg.register(Arc::new(Scs));
        reg.register(Arc::new(Csc));
        reg
    })
}

fn scan_modes() -> &'static Registry<dyn ScanMode> {
    static REG: OnceLock<Registry<dyn ScanMode>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg = Registry::<dyn ScanMode>::new("scan mode");
        reg.register(Arc::new(OneScan));
        reg.register(Arc::new(FourScan));
        reg
    })
}

fn class_token_policies() -> &'static Registry<dyn ClassTokenPolicy> {
    static REG: OnceLock<Registry<dyn ClassTokenPolicy>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg = Registry::<dyn ClassTokenPolicy>::new("class token policy");
        reg.register(Arc::new(Tail));
        reg.register(Arc::new(Middle));
        reg
    })
}

pub fn separator_value(name: &str) -> Result<Arc<dyn SeparatorValue>> {
    separator_values().get(name)
}

pub fn separator_value_names() -> Vec<&'static str> {
    separator_values().names()
}

pub fn separator_value_by_code(code: u8) -> Result<Arc<dyn SeparatorValue>> {
    separator_values()
        .entries
        .values()
        .find(|v| v.code() == code)
        .cloned()
        .ok_or_else(|| StarError::InvalidArgument(format!("unknown separator value code {code}")))
}

pub fn layout_by_code(code: u8) -> Result<Arc<dyn LayoutStrategy>> {
    layouts()
        .entries
        .values()
        .find(|v| v.code() == code)
        .cloned()
        .ok_or_else(|| StarError::InvalidArgument(format!("unknown layout code {code}")))
}

pub fn layout(name: &str) -> Result<Arc<dyn LayoutStrategy>> {
    layouts().get(name)
}

pub fn layout_names() -> Vec<&'static str> {
    layouts().names()
}

pub fn scan_mode(name: &str) -> Result<Arc<dyn ScanMode>> {
    scan_modes().get(name)
}

pub fn scan_mode_names() -> Vec<&'static str> {
    scan_modes().names()
}

pub fn class_token_policy(name: &str) -> Result<Arc<dyn ClassTokenPolicy>> {
    class_token_policies().get(name)
}

pub fn class_token_policy_names() -> Vec<&'static str> {
    class_token_policies().names()
}
