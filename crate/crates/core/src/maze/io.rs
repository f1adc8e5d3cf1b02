//! Newline-delimited JSON dataset files.
//!
//! Line 1 is a header carrying the maze, the generator metadata and the
//! normalization statistics; every following line is one trajectory with
//! states in normalized coordinates.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{ActionId, Dataset, DatasetMeta, EnvState, MazeSpec, Trajectory};
use crate::norm::Normalizer;
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MazeHeader {
    width: usize,
    height: usize,
    walls: String,
    #[serde(default = "one")]
    cell_size: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct HeaderMeta {
    generator: String,
    seed: u64,
    #[serde(default)]
    params: Map<String, Value>,
    normalizer: Normalizer,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    maze: MazeHeader,
    meta: HeaderMeta,
}

#[derive(Deserialize)]
struct Record {
    episode_id: u64,
    states: Vec<[f64; 2]>,
    actions: Vec<u8>,
}

fn push_float(out: &mut String, v: f64) {
    use std::fmt::Write as _;
    // 17 significant digits
    write!(out, "{v:.16e}").expect("writing to a String");
}

fn trajectory_line(traj: &Trajectory, norm: &Normalizer) -> String {
    let mut line = format!("{{\"episode_id\":{},\"states\":[", traj.episode_id);
    for (i, s) in traj.states.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push('[');
        push_float(&mut line, norm.normalize_value(0, s.x));
        line.push(',');
        push_float(&mut line, norm.normalize_value(1, s.y));
        line.push(']');
    }
    line.push_str("],\"actions\":[");
    for (i, a) in traj.actions.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str(&a.id().to_string());
    }
    line.push_str("]}");
    line
}

/// Serializes `dataset` to `writer`. Output depends only on the dataset.
pub fn write_dataset_to<W: Write>(dataset: &Dataset, mut writer: W) -> Result<()> {
    let norm = dataset.normalizer();
    let header = Header {
        format_version: DATASET_FORMAT_VERSION,
        maze: MazeHeader {
            width: dataset.spec.width(),
            height: dataset.spec.height(),
            walls: dataset.spec.walls_string(),
            cell_size: dataset.spec.cell_size(),
        },
        meta: HeaderMeta {
            generator: dataset.meta.generator.clone(),
            seed: dataset.meta.seed,
            params: dataset.meta.params.clone(),
            normalizer: norm.clone(),
        },
    };
    serde_json::to_writer(&mut writer, &header)?;
    writer.write_all(b"\n")?;
    for traj in &dataset.trajectories {
        writer.write_all(trajectory_line(traj, &norm).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_dataset_to(dataset, BufWriter::new(file))
}

/// Parses a dataset, checking that every state lands exactly on a free cell
/// centre after denormalization.
pub fn read_dataset_from<R: Read>(reader: R) -> Result<Dataset> {
    let mut lines = BufReader::new(reader).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Corrupt("empty dataset file".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let spec = MazeSpec::from_walls_string(
        header.maze.width,
        header.maze.height,
        &header.maze.walls,
        header.maze.cell_size,
    )?;
    let norm = header.meta.normalizer;
    if norm.dim() != 2 {
        return Err(Error::Corrupt(format!("normalizer has dim {}", norm.dim())));
    }

    let mut trajectories = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let mut states = Vec::with_capacity(rec.states.len());
        for [nx, ny] in rec.states {
            let s = EnvState::new(norm.denormalize_value(0, nx), norm.denormalize_value(1, ny));
            let cell = spec.free_cell_of(&s)?;
            if !spec.center(cell).bits_eq(&s) {
                return Err(Error::Corrupt(format!(
                    "line {}: state ({}, {}) is not a cell centre",
                    lineno + 2,
                    s.x,
                    s.y
                )));
            }
            states.push(s);
        }
        let actions = rec
            .actions
            .into_iter()
            .map(ActionId::new)
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory {
            episode_id: rec.episode_id,
            states,
            actions,
        });
    }

    let dataset = Dataset {
        spec,
        trajectories,
        meta: DatasetMeta {
            generator: header.meta.generator,
            seed: header.meta.seed,
            params: header.meta.params,
        },
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset_from(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{generate_explore_dataset, generate_stitch_dataset, ExploreParams, StitchParams};

    fn bytes(d: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset_to(d, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let spec = MazeSpec::medium();
        let d = generate_stitch_dataset(
            &spec,
            StitchParams {
                n_episodes: 12,
                max_span: 4,
                ep_len: 40,
                seed: 4,
            },
        )
        .unwrap();
        let buf = bytes(&d);
        let back = read_dataset_from(&buf[..]).unwrap();
        assert_eq!(back, d);
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn non_unit_cell_size_round_trip() {
        let spec = MazeSpec::from_ascii(&MazeSpec::compact8().to_ascii(), 0.3).unwrap();
        let d = generate_explore_dataset(
            &spec,
            ExploreParams {
                n_episodes: 6,
                ep_len: 30,
                resample_interval: 10,
                noise_prob: 0.3,
                seed: 1,
            },
        )
        .unwrap();
        let back = read_dataset_from(&bytes(&d)[..]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn header_and_precision() {
        let spec = MazeSpec::compact8();
        let d = generate_stitch_dataset(
            &spec,
            StitchParams {
                n_episodes: 2,
                max_span: 2,
                ep_len: 5,
                seed: 0,
            },
        )
        .unwrap();
        let text = String::from_utf8(bytes(&d)).unwrap();
        let mut lines = text.lines();
        let header: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header["format_version"], DATASET_FORMAT_VERSION);
        assert_eq!(header["maze"]["walls"].as_str().unwrap().len(), 64);
        assert!(header["meta"]["normalizer"]["mean"].is_array());
        let rec: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(rec["states"].as_array().unwrap().len(), 5);
        let line = text.lines().nth(1).unwrap();
        let first_num = line.split("[[").nth(1).unwrap().split(',').next().unwrap();
        let mantissa = first_num.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.replace('.', "").len(), 17);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(read_dataset_from(&b""[..]), Err(Error::Corrupt(_))));
        let spec = MazeSpec::compact8();
        let d = Dataset {
            spec: spec.clone(),
            trajectories: vec![],
            meta: DatasetMeta::new("x", 0),
        };
        let text = String::from_utf8(bytes(&d)).unwrap();
        let bumped = text.replace("\"format_version\":1", "\"format_version\":99");
        assert!(matches!(
            read_dataset_from(bumped.as_bytes()),
            Err(Error::Version { found: 99, .. })
        ));
        let off_centre = format!("{text}{{\"episode_id\":0,\"states\":[[0.1,0.0]],\"actions\":[0]}}\n");
        assert!(read_dataset_from(off_centre.as_bytes()).is_err());
    }
}
