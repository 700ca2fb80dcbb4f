//! CSV file formats.
//!
//! Trajectories: header `user_id,timestamp,location_id`, one visit per row.
//! Flows: header `region_id,timestamp,inflow,outflow`; regions with removed
//! flow series simply have no rows. UTF-8, LF line endings, integer step
//! timestamps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use unimob_core::domain::{
    validate_trajectory, FlowField, GridSpec, RegionId, Trajectory, Visit, INFLOW, OUTFLOW,
};

use crate::error::{AppError, Result};

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut out = String::from("user_id,timestamp,location_id\n");
    for t in trajs {
        for v in &t.visits {
            writeln!(out, "{},{},{}", t.user_id, v.time, v.location).expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_trajectories(path: &Path, grid: &GridSpec) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "user_id,timestamp,location_id" {
        return Err(AppError::data(format!(
            "{}: unexpected trajectory header `{header}`",
            path.display()
        )));
    }
    // rows are grouped per user in file order
    let mut order: Vec<u64> = Vec::new();
    let mut per_user: std::collections::BTreeMap<u64, Vec<Visit>> = Default::default();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let parse_err = || AppError::data(format!("{}:{}: bad row `{line}`", path.display(), ln + 2));
        let user: u64 = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
        let time: usize = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
        let location: usize =
            it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
        if !per_user.contains_key(&user) {
            order.push(user);
        }
        per_user.entry(user).or_default().push(Visit { location, time });
    }
    let mut out = Vec::with_capacity(order.len());
    for user in order {
        let mut visits = per_user.remove(&user).unwrap();
        visits.sort_by_key(|v| v.time);
        let traj = validate_trajectory(Trajectory::new(user, visits), grid)
            .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
        out.push(traj);
    }
    Ok(out)
}

/// Write the two-channel flow field, skipping `missing` regions entirely.
pub fn write_flow(path: &Path, flow: &FlowField, missing: &BTreeSet<RegionId>) -> Result<()> {
    let mut out = String::from("region_id,timestamp,inflow,outflow\n");
    for region in 0..flow.n_regions {
        if missing.contains(&region) {
            continue;
        }
        for t in 0..flow.n_steps {
            writeln!(
                out,
                "{},{},{},{}",
                region,
                t,
                flow.get(INFLOW, t, region),
                flow.get(OUTFLOW, t, region)
            )
            .expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a flow CSV back; regions of the grid with no rows are reported as
/// missing.
pub fn read_flow(
    path: &Path,
    grid: &GridSpec,
    n_steps: usize,
) -> Result<(FlowField, BTreeSet<RegionId>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "region_id,timestamp,inflow,outflow" {
        return Err(AppError::data(format!(
            "{}: unexpected flow header `{header}`",
            path.display()
        )));
    }
    let l = grid.n_regions();
    let mut flow = FlowField::zeros(2, n_steps, l);
    let mut seen: BTreeSet<RegionId> = BTreeSet::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let parse_err = || AppError::data(format!("{}:{}: bad row `{line}`", path.display(), ln + 2));
        let region: usize = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
        let t: usize = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
        let inflow: f64 = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
        let outflow: f64 = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(parse_err)?;
        if region >= l || t >= n_steps {
            return Err(AppError::data(format!(
                "{}:{}: region {region} / step {t} out of range",
                path.display(),
                ln + 2
            )));
        }
        *flow.get_mut(INFLOW, t, region) = inflow;
        *flow.get_mut(OUTFLOW, t, region) = outflow;
        seen.insert(region);
    }
    let missing: BTreeSet<RegionId> = (0..l).filter(|r| !seen.contains(r)).collect();
    Ok((flow, missing))
}
