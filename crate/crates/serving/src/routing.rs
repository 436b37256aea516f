use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use opd_core::rng::seeded_rng;
use rand::seq::SliceRandom;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Result, ServingError};

fn unique_map<'de, D>(deserializer: D) -> std::result::Result<BTreeMap<String, String>, D::Error>
where
    D: Deserializer<'de>,
{
    struct Unique;
    impl<'de> Visitor<'de> for Unique {
        type Value = BTreeMap<String, String>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a map from domain to teacher name")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = map.next_entry::<String, String>()? {
                if out.insert(k.clone(), v).is_some() {
                    return Err(serde::de::Error::custom(format!("duplicate domain `{k}`")));
                }
            }
            Ok(out)
        }
    }
    deserializer.deserialize_map(Unique)
}

/// `{"routes": {domain: teacher}, "pools": {teacher: ["host:port", ...]}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingTable {
    #[serde(deserialize_with = "unique_map")]
    pub routes: BTreeMap<String, String>,
    pub pools: BTreeMap<String, Vec<String>>,
}

impl RoutingTable {
    pub fn new(routes: BTreeMap<String, String>, pools: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let table = Self { routes, pools };
        table.validate()?;
        Ok(table)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text).map_err(|e| ServingError::Config(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for (domain, teacher) in &self.routes {
            match self.pools.get(teacher) {
                None => {
                    return Err(ServingError::Config(format!(
                        "domain `{domain}` routes to teacher `{teacher}` which has no pool"
                    )))
                }
                Some(pool) if pool.is_empty() => return Err(ServingError::EmptyPool(teacher.clone())),
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn teacher_for(&self, domain: &str) -> Result<&str> {
        self.routes
            .get(domain)
            .map(String::as_str)
            .ok_or_else(|| ServingError::Routing {
                domain: domain.to_string(),
                known: self.routes.keys().cloned().collect(),
            })
    }

    /// Endpoint pool of the teacher `domain` routes to.
    pub fn route(&self, domain: &str) -> Result<&[String]> {
        let teacher = self.teacher_for(domain)?;
        Ok(&self.pools[teacher])
    }
}

/// Shuffled round-robin over one pool: the order is permuted once with the
/// seed on first use, then cycled through by an atomic cursor.
#[derive(Debug)]
pub struct RoundRobin {
    pool: Vec<String>,
    seed: u64,
    order: OnceLock<Vec<String>>,
    cursor: AtomicUsize,
}

impl RoundRobin {
    pub fn new(pool: Vec<String>, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(ServingError::EmptyPool(String::new()));
        }
        Ok(Self {
            pool,
            seed,
            order: OnceLock::new(),
            cursor: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    /// The permuted rotation order.
    pub fn order(&self) -> &[String] {
        self.order.get_or_init(|| {
            let mut order = self.pool.clone();
            order.shuffle(&mut seeded_rng(self.seed));
            order
        })
    }

    pub fn next_endpoint(&self) -> &str {
        let order = self.order();
        let i = self.cursor.fetch_add(1, Ordering::Relaxed);
        &order[i % order.len()]
    }
}
