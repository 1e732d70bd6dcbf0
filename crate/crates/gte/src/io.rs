//! Dataset CSV and JSON report formats.
//!
//! A dataset is stored one row per (query, slot):
//!
//! ```text
//! query_id,slot,item_id,viewer_v,c1,c2,w,exposed,y
//! ```
//!
//! Datasets whose viewer or item features are not one- and two-dimensional
//! use the generic header `query_id,slot,item_id,v0..,f0..,w,exposed,y`.
//! `y` repeats the query's outcome on every row. Reals are written in the
//! shortest form that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use anyhow::{bail, Context, Result};
use gte_core::baselines::BaselineReport;
use gte_core::debiased::EstimateReport;
use gte_core::simulator::{Dataset, Item, Observation};
use serde_json::{json, Value};

fn header(dataset: &Dataset) -> Vec<String> {
    let mut h: Vec<String> = vec!["query_id".into(), "slot".into(), "item_id".into()];
    let (vd, id) = (dataset.viewer_dim(), dataset.item_dim());
    if vd == 1 && id == 2 {
        h.extend(["viewer_v", "c1", "c2"].map(String::from));
    } else {
        h.extend((0..vd).map(|i| format!("v{i}")));
        h.extend((0..id).map(|i| format!("f{i}")));
    }
    h.extend(["w", "exposed", "y"].map(String::from));
    h
}

pub fn write_dataset<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(dataset))?;
    let mut row: Vec<String> = Vec::new();
    for obs in dataset.observations() {
        for slot in 0..obs.set_size() {
            let item = dataset.slot_item(obs, slot);
            row.clear();
            row.push(obs.query_id.to_string());
            row.push(slot.to_string());
            row.push(item.id.to_string());
            row.extend(obs.viewer.iter().map(f64::to_string));
            row.extend(item.features.iter().map(f64::to_string));
            row.push(u8::from(obs.treatment[slot]).to_string());
            row.push(u8::from(obs.exposed_slot == slot).to_string());
            row.push(obs.outcome.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Columns {
    query: usize,
    slot: usize,
    item: usize,
    viewer: Vec<usize>,
    features: Vec<usize>,
    w: usize,
    exposed: usize,
    y: usize,
}

fn numbered(names: &[&str], prefix: &str) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .filter_map(|(i, n)| n.strip_prefix(prefix).and_then(|d| d.parse::<usize>().ok()).map(|d| (d, i)))
        .collect();
    cols.sort_unstable();
    cols.into_iter().map(|(_, i)| i).collect()
}

fn columns(names: &[&str]) -> Result<Columns> {
    let find = |name: &str| names.iter().position(|n| *n == name).with_context(|| format!("missing column `{name}`"));
    let (viewer, features) = match (find("viewer_v"), find("c1"), find("c2")) {
        (Ok(v), Ok(c1), Ok(c2)) => (vec![v], vec![c1, c2]),
        _ => (numbered(names, "v"), numbered(names, "f")),
    };
    if viewer.is_empty() || features.is_empty() {
        bail!("dataset header names no viewer or item feature columns");
    }
    Ok(Columns {
        query: find("query_id")?,
        slot: find("slot")?,
        item: find("item_id")?,
        viewer,
        features,
        w: find("w")?,
        exposed: find("exposed")?,
        y: find("y")?,
    })
}

fn flag(s: &str, line: u64) -> Result<bool> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => bail!("line {line}: expected 0 or 1, got `{other}`"),
    }
}

struct PendingQuery {
    viewer: Vec<f64>,
    slots: Vec<(usize, u64, bool)>,
    exposed: Option<usize>,
    y: f64,
}

/// Reads a dataset CSV. Rows may come in any order; each query's slots must
/// be numbered `0..K` and exactly one of them exposed.
pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let names: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let cols = columns(&refs)?;
    let mut items: BTreeMap<u64, Item> = BTreeMap::new();
    let mut queries: BTreeMap<u64, PendingQuery> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let get = |c: usize| rec.get(c).with_context(|| format!("line {line}: short row"));
        let real = |c: usize| -> Result<f64> {
            let s = get(c)?;
            s.parse::<f64>().with_context(|| format!("line {line}: bad number `{s}`"))
        };
        let qid: u64 = get(cols.query)?.parse().with_context(|| format!("line {line}: bad query_id"))?;
        let slot: usize = get(cols.slot)?.parse().with_context(|| format!("line {line}: bad slot"))?;
        let item_id: u64 = get(cols.item)?.parse().with_context(|| format!("line {line}: bad item_id"))?;
        let viewer = cols.viewer.iter().map(|&c| real(c)).collect::<Result<Vec<_>>>()?;
        let features = cols.features.iter().map(|&c| real(c)).collect::<Result<Vec<_>>>()?;
        let treated = flag(get(cols.w)?, line)?;
        let exposed = flag(get(cols.exposed)?, line)?;
        let y = real(cols.y)?;
        match items.get(&item_id) {
            Some(it) if it.features != features || it.treated != treated => {
                bail!("line {line}: item {item_id} changes features or treatment")
            }
            Some(_) => {}
            None => {
                items.insert(item_id, Item { id: item_id, features, treated });
            }
        }
        let q = queries.entry(qid).or_insert_with(|| PendingQuery { viewer: viewer.clone(), slots: Vec::new(), exposed: None, y });
        if q.viewer != viewer || q.y.to_bits() != y.to_bits() {
            bail!("line {line}: query {qid} changes viewer features or outcome between rows");
        }
        if exposed {
            if q.exposed.is_some() {
                bail!("line {line}: query {qid} has more than one exposed slot");
            }
            q.exposed = Some(slot);
        }
        q.slots.push((slot, item_id, treated));
    }
    let mut observations = Vec::with_capacity(queries.len());
    for (qid, mut q) in queries {
        q.slots.sort_unstable_by_key(|s| s.0);
        if q.slots.iter().enumerate().any(|(i, s)| s.0 != i) {
            bail!("query {qid}: slots are not numbered 0..K");
        }
        let exposed_slot = q.exposed.with_context(|| format!("query {qid}: no exposed slot"))?;
        observations.push(Observation {
            query_id: qid,
            viewer: q.viewer,
            item_ids: q.slots.iter().map(|s| s.1).collect(),
            treatment: q.slots.iter().map(|s| s.2).collect(),
            exposed_slot,
            outcome: q.y,
        });
    }
    if observations.is_empty() {
        bail!("dataset has no rows");
    }
    Dataset::new(items.into_values().collect(), observations).context("inconsistent dataset")
}

pub fn estimate_json(r: &EstimateReport) -> Value {
    let d = &r.diagnostics;
    json!({
        "estimator": "DB",
        "tau_hat": r.tau_hat,
        "se": r.se,
        "ci_lo": r.ci95.0,
        "ci_hi": r.ci95.1,
        "n": r.n,
        "folds": r.per_fold.iter().map(|f| json!({"id": f.id, "tau": f.tau, "var": f.var})).collect::<Vec<_>>(),
        "diagnostics": {
            "min_eig": d.min_eig,
            "jittered": d.jittered,
            "plugin": d.plugin,
            "fit": {"logloss": d.fit.logloss, "acc": d.fit.accuracy, "auc": d.fit.auc, "mse": d.fit.mse},
            "warnings": d.warnings,
        },
    })
}

pub fn baseline_json(r: &BaselineReport) -> Value {
    json!({
        "estimator": r.estimator,
        "tau_hat": r.tau_hat,
        "se": r.se,
        "se_method": r.se_method,
        "ci_lo": r.tau_hat - gte_core::stats::Z95 * r.se,
        "ci_hi": r.tau_hat + gte_core::stats::Z95 * r.se,
        "n": r.n,
        "n_effective": r.n_effective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gte_core::simulator::{simulate, DgpConfig};

    #[test]
    fn round_trip_is_exact() {
        let d = simulate(&DgpConfig { n_items: 30, n_queries: 50, ..DgpConfig::default() }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back.observations(), d.observations());
        for obs in d.observations() {
            for &id in &obs.item_ids {
                assert_eq!(back.item(id), d.item(id));
            }
        }
    }

    #[test]
    fn generic_header() {
        let text = "query_id,slot,item_id,v0,v1,f0,w,exposed,y\n\
                    7,1,3,0.5,1,2,1,1,4.5\n\
                    7,0,2,0.5,1,-1,0,0,4.5\n";
        let d = read_dataset(text.as_bytes()).unwrap();
        let o = &d.observations()[0];
        assert_eq!(o.item_ids, vec![2, 3]);
        assert_eq!(o.treatment, vec![false, true]);
        assert_eq!(o.exposed_slot, 1);
        assert_eq!(d.viewer_dim(), 2);
        assert_eq!(d.item_dim(), 1);
    }

    #[test]
    fn rejects_two_exposed_slots() {
        let text = "query_id,slot,item_id,viewer_v,c1,c2,w,exposed,y\n\
                    0,0,1,1,0,0.5,0,1,1\n\
                    0,1,2,1,1,0.5,0,1,1\n";
        assert!(read_dataset(text.as_bytes()).is_err());
    }

    #[test]
    fn rejects_inconsistent_items() {
        let text = "query_id,slot,item_id,viewer_v,c1,c2,w,exposed,y\n\
                    0,0,1,1,0,0.5,0,1,1\n\
                    1,0,1,1,0,0.5,1,1,1\n";
        assert!(read_dataset(text.as_bytes()).is_err());
    }
}
