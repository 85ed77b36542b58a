//! Delimited-text input and output: bid lists, solutions and record tables.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auction::{AuctionError, Bid, BidBook, BidId, Placement, Solution};
use crate::model::{ApId, CloudletId, PmTypeId, System, VmTypeId};
use crate::money::{Money, MoneyParseError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: bad price: {source}")]
    Price {
        row: usize,
        #[source]
        source: MoneyParseError,
    },
    #[error("row {row}: unknown {kind} {name:?}")]
    UnknownName {
        row: usize,
        kind: &'static str,
        name: String,
    },
    #[error("row {row}: bid {id} is not in the bid list")]
    UnknownBid { row: usize, id: BidId },
    #[error("row {row}: bid {id} does not match the bid list")]
    Mismatch { row: usize, id: BidId },
    #[error("row {row}: bid {id} listed twice")]
    DuplicateRow { row: usize, id: BidId },
    #[error("row {row}: placement columns must be all set or all empty")]
    PartialPlacement { row: usize },
    #[error(transparent)]
    Auction(#[from] AuctionError),
}

#[derive(Debug, Serialize, Deserialize)]
struct BidRow {
    id: BidId,
    ap: String,
    vm_type: String,
    price: String,
}

/// Reads `id,ap,vm_type,price` rows; names resolve against `system`.
pub fn read_bids<R: Read>(reader: R, system: &System) -> Result<Vec<Bid>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<BidRow>().enumerate() {
        let row = row?;
        let n = i + 1;
        out.push(Bid {
            id: row.id,
            ap: resolve_ap(system, &row.ap, n)?,
            vm_type: resolve_vm(system, &row.vm_type, n)?,
            price: row
                .price
                .parse()
                .map_err(|source| DataError::Price { row: n, source })?,
        });
    }
    Ok(out)
}

pub fn write_bids<W: Write>(writer: W, bids: &[Bid], system: &System) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    w.write_record(["id", "ap", "vm_type", "price"])?;
    for b in bids {
        w.serialize(BidRow {
            id: b.id,
            ap: system.topology.aps[b.ap.0].name.clone(),
            vm_type: system.catalog.vm(b.vm_type).name.clone(),
            price: b.price.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

fn resolve_ap(system: &System, name: &str, row: usize) -> Result<ApId, DataError> {
    system
        .topology
        .ap_by_name(name)
        .ok_or_else(|| DataError::UnknownName {
            row,
            kind: "AP",
            name: name.to_string(),
        })
}

fn resolve_vm(system: &System, name: &str, row: usize) -> Result<VmTypeId, DataError> {
    system
        .catalog
        .vm_by_name(name)
        .ok_or_else(|| DataError::UnknownName {
            row,
            kind: "VM type",
            name: name.to_string(),
        })
}

#[derive(Debug, Serialize, Deserialize)]
struct SolutionRow {
    bid: BidId,
    ap: String,
    vm_type: String,
    price: String,
    cloudlet: Option<String>,
    pm_type: Option<String>,
    pm_index: Option<u32>,
    price_paid: Option<String>,
}

/// One row per bid; placement columns and `price_paid` are empty for
/// rejected bids.
pub fn write_solution<W: Write>(
    writer: W,
    book: &BidBook,
    solution: &Solution,
    system: &System,
) -> Result<(), DataError> {
    let prices = solution.local_prices(book)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    w.write_record([
        "bid",
        "ap",
        "vm_type",
        "price",
        "cloudlet",
        "pm_type",
        "pm_index",
        "price_paid",
    ])?;
    for (i, b) in book.bids().iter().enumerate() {
        let p = solution.placement[i];
        w.serialize(SolutionRow {
            bid: b.id,
            ap: system.topology.aps[b.ap.0].name.clone(),
            vm_type: system.catalog.vm(b.vm_type).name.clone(),
            price: b.price.to_string(),
            cloudlet: p.map(|p| system.topology.cloudlet(p.cloudlet).name.clone()),
            pm_type: p.map(|p| system.catalog.pm(p.pm_type).name.clone()),
            pm_index: p.map(|p| p.instance),
            price_paid: p
                .and_then(|_| prices.get(&(b.ap, b.vm_type)))
                .map(Money::to_string),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a solution written by [`write_solution`] back against the same
/// bid list. Bids without a row are rejected; `price_paid` is ignored.
pub fn read_solution<R: Read>(
    reader: R,
    book: &BidBook,
    system: &System,
) -> Result<Solution, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut placement: Vec<Option<Placement>> = vec![None; book.len()];
    let mut seen = vec![false; book.len()];
    for (i, row) in rdr.deserialize::<SolutionRow>().enumerate() {
        let row = row?;
        let n = i + 1;
        let idx = book.index_of(row.bid).ok_or(DataError::UnknownBid {
            row: n,
            id: row.bid,
        })?;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(DataError::DuplicateRow {
                row: n,
                id: row.bid,
            });
        }
        let bid = &book.bids()[idx];
        let price: Money = row
            .price
            .parse()
            .map_err(|source| DataError::Price { row: n, source })?;
        if resolve_ap(system, &row.ap, n)? != bid.ap
            || resolve_vm(system, &row.vm_type, n)? != bid.vm_type
            || price != bid.price
        {
            return Err(DataError::Mismatch {
                row: n,
                id: row.bid,
            });
        }
        placement[idx] = match (row.cloudlet, row.pm_type, row.pm_index) {
            (None, None, None) => None,
            (Some(c), Some(p), Some(m)) => Some(Placement {
                cloudlet: resolve_cloudlet(system, &c, n)?,
                pm_type: resolve_pm(system, &p, n)?,
                instance: m,
            }),
            _ => return Err(DataError::PartialPlacement { row: n }),
        };
    }
    Ok(Solution::from_placements(placement))
}

fn resolve_cloudlet(system: &System, name: &str, row: usize) -> Result<CloudletId, DataError> {
    system
        .topology
        .cloudlet_by_name(name)
        .ok_or_else(|| DataError::UnknownName {
            row,
            kind: "cloudlet",
            name: name.to_string(),
        })
}

fn resolve_pm(system: &System, name: &str, row: usize) -> Result<PmTypeId, DataError> {
    system
        .catalog
        .pm_by_name(name)
        .ok_or_else(|| DataError::UnknownName {
            row,
            kind: "PM type",
            name: name.to_string(),
        })
}

/// Column names of a record type, taken from its default value.
pub fn header_of<T: Serialize + Default>() -> Result<Vec<String>, DataError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(T::default())?;
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

/// Renders rows as CSV with a header row, also when `rows` is empty.
pub fn table_bytes<T: Serialize + Default>(rows: &[T]) -> Result<Vec<u8>, DataError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header_of::<T>()?)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| DataError::Io(e.into_error()))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_table<T: Serialize + Default>(path: &Path, rows: &[T]) -> Result<(), DataError> {
    write_atomic(path, &table_bytes(rows)?)?;
    Ok(())
}
