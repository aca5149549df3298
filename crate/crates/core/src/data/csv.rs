//! CSV datasets: header `x0,…,x{d−1},y,t`, decimal features, integer label
//! and task id.

use std::io::{Read, Write};

use super::{Dataset, TaskSample};
use crate::error::{Error, Result};

fn csv_err(e: ::csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn read_csv<R: Read>(reader: R, classes: &[usize]) -> Result<Dataset> {
    let mut rdr = ::csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = headers.len();
    if cols < 3 || &headers[cols - 2] != "y" || &headers[cols - 1] != "t" {
        return Err(Error::Format("CSV header must be x0..x{d-1},y,t".into()));
    }
    let width = cols - 2;
    for (j, h) in headers.iter().take(width).enumerate() {
        if h != format!("x{j}") {
            return Err(Error::Format(format!("CSV column {j} is `{h}`, expected `x{j}`")));
        }
    }
    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("invalid {what}"),
        };
        let x = (0..width)
            .map(|j| record[j].trim().parse::<f64>().map_err(|_| bad(&format!("feature x{j}"))))
            .collect::<Result<Vec<f64>>>()?;
        let y = record[width].trim().parse().map_err(|_| bad("label"))?;
        let t = record[width + 1].trim().parse().map_err(|_| bad("task id"))?;
        samples.push(TaskSample { x, y, t });
    }
    Dataset::new(width, samples, classes)
}

pub fn write_csv<W: Write>(writer: W, dataset: &Dataset) -> Result<()> {
    let mut w = ::csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..dataset.width()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    header.push("t".into());
    w.write_record(&header).map_err(csv_err)?;
    for s in dataset.samples() {
        let mut row: Vec<String> = s.x.iter().map(|v| format!("{v:?}")).collect();
        row.push(s.y.to_string());
        row.push(s.t.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
