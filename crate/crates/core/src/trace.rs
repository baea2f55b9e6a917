//! Recorded closed-loop runs and their on-disk form: a CSV table with a fixed
//! column order plus a JSON metadata sidecar.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// CSV header, in column order.
pub const COLUMNS: [&str; 18] = [
    "t", "v_r_d", "v_l_d", "v_r", "v_l", "e_r", "e_l", "u_r", "u_l", "phi_hat_r", "phi_hat_l", "phi_norm_r",
    "phi_norm_l", "s_r", "s_l", "x", "y", "theta",
];

/// One controller tick. Pair fields are ordered `[right, left]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceRecord {
    pub t: f64,
    pub reference: [f64; 2],
    pub velocity: [f64; 2],
    /// Tracking error `V - V_d`.
    pub error: [f64; 2],
    pub control: [f64; 2],
    pub phi_hat: [f64; 2],
    pub phi_norm: [f64; 2],
    pub slip: [f64; 2],
    pub pose: [f64; 3],
}

impl TraceRecord {
    pub fn to_row(&self) -> [f64; 18] {
        let r = self;
        [
            r.t,
            r.reference[0],
            r.reference[1],
            r.velocity[0],
            r.velocity[1],
            r.error[0],
            r.error[1],
            r.control[0],
            r.control[1],
            r.phi_hat[0],
            r.phi_hat[1],
            r.phi_norm[0],
            r.phi_norm[1],
            r.slip[0],
            r.slip[1],
            r.pose[0],
            r.pose[1],
            r.pose[2],
        ]
    }

    pub fn from_row(c: &[f64; 18]) -> Self {
        TraceRecord {
            t: c[0],
            reference: [c[1], c[2]],
            velocity: [c[3], c[4]],
            error: [c[5], c[6]],
            control: [c[7], c[8]],
            phi_hat: [c[9], c[10]],
            phi_norm: [c[11], c[12]],
            slip: [c[13], c[14]],
            pose: [c[15], c[16], c[17]],
        }
    }

    /// Pair norm of the tracking error.
    pub fn error_norm(&self) -> f64 {
        self.error[0].hypot(self.error[1])
    }

    pub fn is_finite(&self) -> bool {
        self.to_row().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    /// Index of the last valid record.
    pub last_valid: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub t: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub scenario_id: String,
    pub seed: u64,
    pub rbf_seed: u64,
    pub controller: String,
    /// Gain preset for the adaptive controller; absent for PID.
    pub preset: Option<String>,
    pub terrain: String,
    pub profile: String,
    /// Seconds between records.
    pub sample_period: f64,
    pub dt_plant: f64,
    /// Plant effort gains, recorded for post-hoc rate bounds.
    pub plant_g: [f64; 2],
    /// Adaptive gains, if any: `[kappa, epsilon, sigma, gamma]`.
    pub gains: Option<[f64; 4]>,
    #[serde(default)]
    pub warnings: Vec<Warning>,
    #[serde(default)]
    pub fault: Option<Fault>,
}

impl TraceMeta {
    /// Metadata for a trace that did not come from the engine.
    pub fn synthetic(sample_period: f64) -> Self {
        TraceMeta {
            scenario_id: "synthetic".into(),
            seed: 0,
            rbf_seed: 0,
            controller: "none".into(),
            preset: None,
            terrain: "none".into(),
            profile: "none".into(),
            sample_period,
            dt_plant: sample_period,
            plant_g: [1.0, 1.0],
            gains: None,
            warnings: Vec::new(),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("trace header is missing column(s) {missing:?}; expected columns {expected}")]
    MissingColumns { missing: Vec<String>, expected: String },
    #[error("row {row}: column `{column}` is not a number: `{value}`")]
    BadValue { row: usize, column: &'static str, value: String },
    #[error("trace has no records")]
    Empty,
}

impl SimTrace {
    pub fn is_faulted(&self) -> bool {
        self.meta.fault.is_some()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.t)
    }

    /// Writes the CSV table. Floats use Rust's shortest round-trip form, so
    /// identical runs give identical bytes and reading back is exact.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TraceError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(COLUMNS)?;
        let mut fields = Vec::with_capacity(COLUMNS.len());
        for r in &self.records {
            fields.clear();
            fields.extend(r.to_row().iter().map(|x| x.to_string()));
            w.write_record(&fields)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("metadata serializes") + "\n"
    }

    /// Reads the CSV table. Columns are matched by name, extras are ignored.
    pub fn read_csv<R: Read>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let mut index = [0usize; 18];
        let mut missing = Vec::new();
        for (slot, name) in index.iter_mut().zip(COLUMNS) {
            match headers.iter().position(|h| h.trim() == name) {
                Some(i) => *slot = i,
                None => missing.push(name.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(TraceError::MissingColumns { missing, expected: COLUMNS.join(",") });
        }
        let mut records = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut vals = [0.0; 18];
            for (k, (&i, column)) in index.iter().zip(COLUMNS).enumerate() {
                let raw = rec.get(i).unwrap_or("");
                vals[k] = raw
                    .trim()
                    .parse()
                    .map_err(|_| TraceError::BadValue { row: row + 1, column, value: raw.to_string() })?;
            }
            records.push(TraceRecord::from_row(&vals));
        }
        Ok(records)
    }

    /// Loads `trace.csv`-style data with an optional metadata sidecar.
    pub fn load(csv_path: &std::path::Path, meta_path: Option<&std::path::Path>) -> Result<SimTrace, TraceError> {
        let records = Self::read_csv(std::fs::File::open(csv_path)?)?;
        if records.is_empty() {
            return Err(TraceError::Empty);
        }
        let meta = match meta_path {
            Some(p) => serde_json::from_reader(std::fs::File::open(p)?)?,
            None => {
                let period = if records.len() > 1 { records[1].t - records[0].t } else { 0.0 };
                TraceMeta::synthetic(period)
            }
        };
        Ok(SimTrace { meta, records })
    }
}
