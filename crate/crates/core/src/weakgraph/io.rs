//! CSV form of a combination matrix: a `# N S R <sizes...>` header line
//! (sending sizes first, then receiving sizes) followed by `N` comma-separated
//! rows.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::DMatrix;

use super::{validate_weak_graph, GraphError, Partition, WeakGraph};

pub fn write_weak_graph_csv<W: Write>(g: &WeakGraph, mut out: W) -> Result<(), GraphError> {
    let p = g.partition();
    let sizes: Vec<String> = p
        .sending_sizes()
        .iter()
        .chain(p.receiving_sizes())
        .map(ToString::to_string)
        .collect();
    writeln!(
        out,
        "# {} {} {} {}",
        p.num_agents(),
        p.num_sending_subnets(),
        p.num_receiving_subnets(),
        sizes.join(" ")
    )?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let a = g.combination_matrix();
    for row in a.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses and validates a graph written by [`write_weak_graph_csv`].
pub fn read_weak_graph_csv<R: Read>(input: R) -> Result<WeakGraph, GraphError> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<usize> = header
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| GraphError::Format("missing '# N S R <sizes>' header".into()))?
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| GraphError::Format(format!("bad header token {t:?}")))
        })
        .collect::<Result<_, _>>()?;
    let (n, s, r) = match fields.as_slice() {
        [n, s, r, ..] => (*n, *s, *r),
        _ => return Err(GraphError::Format("header needs N, S and R".into())),
    };
    if fields.len() != 3 + s + r {
        return Err(GraphError::Format(format!(
            "header lists {} sizes, expected S + R = {}",
            fields.len() - 3,
            s + r
        )));
    }
    let partition = Partition::new(fields[3..3 + s].to_vec(), fields[3 + s..].to_vec())?;
    if partition.num_agents() != n {
        return Err(GraphError::Format(format!(
            "sizes add up to {}, header says N = {n}",
            partition.num_agents()
        )));
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::with_capacity(n * n);
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        if record.len() != n {
            return Err(GraphError::Format(format!(
                "row {} has {} entries, expected {n}",
                rows + 1,
                record.len()
            )));
        }
        for field in record.iter() {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|_| GraphError::Format(format!("bad number {field:?}")))?,
            );
        }
        rows += 1;
    }
    if rows != n {
        return Err(GraphError::Format(format!("found {rows} rows, expected {n}")));
    }
    validate_weak_graph(DMatrix::from_row_slice(n, n, &values), &partition)
}
