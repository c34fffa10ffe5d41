//! Synthetic embodied task generators.
//!
//! Every prompt is `<bos> /no_think [kind] {dimension}` followed by a symbolic
//! observation. Objects live on a 5×5 grid, usually given as `item row col`; box
//! objects cover a 2×2 block given by its top-left `col row`. MCQ prompts list the
//! options and then the item, whose category letter is the answer. The target is
//! always derived from the observation by a fixed rule, so every instance is solvable.

use std::io::{BufRead, Write};

use crate::numerics::RngStream;
use crate::rewards::{Box2D, Point, PointSet, Trajectory};
use crate::task::{Answer, Dimension, TaskInstance, TaskKind};

use super::vocab::{self, Vocabulary};
use super::PolicyError;

pub const GRID: u32 = 5;
/// Number of answer options in multiple-choice tasks.
pub const MCQ_OPTIONS: u32 = 4;

fn item(i: u32) -> u32 {
    vocab::ITEM0 + i
}

/// Category letter offset of each item for MCQ tasks.
pub fn item_category(i: u32) -> u32 {
    i % MCQ_OPTIONS
}

fn cell_box(row: u32, col: u32) -> Box2D {
    block_box(row, col, row, col)
}

fn block_box(r0: u32, c0: u32, r1: u32, c1: u32) -> Box2D {
    let g = f64::from(GRID);
    Box2D::new(
        f64::from(c0) / g,
        f64::from(r0) / g,
        f64::from(c1 + 1) / g,
        f64::from(r1 + 1) / g,
    )
    .expect("grid blocks lie in the unit square")
}

fn cell_center(row: u32, col: u32) -> Point {
    let g = f64::from(2 * GRID);
    Point::new(f64::from(2 * col + 1) / g, f64::from(2 * row + 1) / g)
}

fn distinct(rng: &mut RngStream, n: usize, upper: u32) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..upper).collect();
    rng.shuffle(&mut pool);
    pool.truncate(n);
    pool
}

/// Default capability dimension for each kind.
pub fn default_dimension(kind: TaskKind) -> Dimension {
    match kind {
        TaskKind::Box | TaskKind::Multibox | TaskKind::Point | TaskKind::Pointset | TaskKind::Count => {
            Dimension::Perception
        }
        TaskKind::Trajectory | TaskKind::Regression => Dimension::Prediction,
        TaskKind::Mcq | TaskKind::Binary | TaskKind::Freeform => Dimension::Interaction,
        TaskKind::Ordering => Dimension::Planning,
    }
}

pub fn generate_task(id: u64, kind: TaskKind, dimension: Dimension, rng: &mut RngStream) -> TaskInstance {
    let mut prompt = vec![
        vocab::BOS,
        vocab::MODE_NO_THINK,
        Vocabulary::kind_token(kind),
        Vocabulary::dimension_token(dimension),
    ];
    let d = |v: u32| Vocabulary::digit(v);
    let target = match kind {
        TaskKind::Box => {
            // an object covering a 2×2 block of cells, given by its top-left cell
            let obj = rng.below(8) as u32;
            let (c0, r0) = (rng.below(4) as u32, rng.below(4) as u32);
            prompt.extend([item(obj), vocab::SEP, d(c0), vocab::SEP, d(r0)]);
            Answer::Box(block_box(r0, c0, r0 + 1, c0 + 1))
        }
        TaskKind::Point => {
            let (obj, row, col) = (rng.below(8) as u32, rng.below(5) as u32, rng.below(5) as u32);
            prompt.extend([item(obj), vocab::SEP, d(row), vocab::SEP, d(col)]);
            Answer::Point(cell_center(row, col))
        }
        TaskKind::Multibox | TaskKind::Pointset => {
            let n = 2 + rng.below(2);
            let cells = distinct(rng, n, GRID * GRID);
            let objs = distinct(rng, n, vocab::ITEMS.len() as u32);
            for (k, (&c, &o)) in cells.iter().zip(&objs).enumerate() {
                if k > 0 {
                    prompt.push(vocab::BAR);
                }
                prompt.extend([item(o), vocab::SEP, d(c / GRID), vocab::SEP, d(c % GRID)]);
            }
            if kind == TaskKind::Multibox {
                Answer::Multibox(cells.iter().map(|&c| cell_box(c / GRID, c % GRID)).collect())
            } else {
                Answer::Pointset(PointSet(cells.iter().map(|&c| cell_center(c / GRID, c % GRID)).collect()))
            }
        }
        TaskKind::Trajectory => {
            let (r0, c0) = (rng.below(5) as u32, rng.below(5) as u32);
            let (mut r1, mut c1) = (rng.below(5) as u32, rng.below(5) as u32);
            if (r0, c0) == (r1, c1) {
                c1 = (c1 + 1 + rng.below(4) as u32) % GRID;
                r1 = (r1 + rng.below(2) as u32) % GRID;
            }
            prompt.extend([d(r0), vocab::SEP, d(c0), vocab::BAR, d(r1), vocab::SEP, d(c1)]);
            // L-shaped path: along the row first, then along the column
            let mut pts = vec![cell_center(r0, c0)];
            let (mut r, mut c) = (r0, c0);
            while c != c1 {
                c = if c1 > c { c + 1 } else { c - 1 };
                pts.push(cell_center(r, c));
            }
            while r != r1 {
                r = if r1 > r { r + 1 } else { r - 1 };
                pts.push(cell_center(r, c));
            }
            Answer::Trajectory(Trajectory::new(pts).expect("distinct endpoints"))
        }
        TaskKind::Mcq => {
            let obj = rng.below(8) as u32;
            prompt.extend((0..MCQ_OPTIONS).map(|k| vocab::LETTER_A + k));
            prompt.extend([vocab::BAR, item(obj)]);
            let letter = item_category(obj);
            Answer::Mcq(char::from(b'A' + letter as u8))
        }
        TaskKind::Binary => {
            let objs = distinct(rng, 2, 8);
            let cols = distinct(rng, 2, GRID);
            prompt.extend([item(objs[0]), d(cols[0]), vocab::SEP, item(objs[1]), d(cols[1])]);
            Answer::Binary(cols[0] < cols[1])
        }
        TaskKind::Count => {
            let query = rng.below(4) as u32;
            let n = 3 + rng.below(5);
            let mut count = 0;
            for _ in 0..n {
                let o = rng.below(4) as u32;
                count += u64::from(o == query);
                prompt.push(item(o));
            }
            prompt.extend([vocab::BAR, item(query)]);
            Answer::Count(count)
        }
        TaskKind::Ordering => {
            let n = 3 + rng.below(2);
            let objs = distinct(rng, n, 8);
            let ranks = distinct(rng, n, 10);
            let mut pairs: Vec<(u32, u32)> = ranks.iter().copied().zip(objs.iter().copied()).collect();
            for (k, &(r, o)) in pairs.iter().enumerate() {
                if k > 0 {
                    prompt.push(vocab::SEP);
                }
                prompt.extend([item(o), d(r)]);
            }
            pairs.sort_unstable();
            Answer::Ordering(pairs.iter().map(|&(_, o)| vocab::ITEMS[o as usize].to_string()).collect())
        }
        TaskKind::Regression => {
            let (a, b) = (1 + rng.below(9) as u32, 1 + rng.below(9) as u32);
            prompt.extend([d(a), vocab::SEP, d(b)]);
            Answer::Regression(f64::from(a * b))
        }
        TaskKind::Freeform => {
            let objs = distinct(rng, 2, 8);
            let rel = rng.below(vocab::RELATIONS.len()) as u32;
            prompt.extend([item(objs[0]), d(rel), item(objs[1])]);
            Answer::Freeform(format!(
                "{} {} {}",
                vocab::ITEMS[objs[0] as usize],
                vocab::RELATIONS[rel as usize],
                vocab::ITEMS[objs[1] as usize]
            ))
        }
    };
    TaskInstance {
        id,
        kind,
        dimension,
        prompt_tokens: prompt,
        target,
    }
}

/// Pool of `n` tasks, kinds taken round-robin, each with its default dimension.
pub fn generate_pool(kinds: &[TaskKind], n: usize, rng: &mut RngStream) -> Vec<TaskInstance> {
    (0..n)
        .map(|i| {
            let kind = kinds[i % kinds.len()];
            generate_task(i as u64, kind, default_dimension(kind), rng)
        })
        .collect()
}

/// Checks a task read from disk: known tokens, bounded prompt and a target of the right kind.
pub fn validate_task(task: &TaskInstance, max_prompt_len: usize) -> Result<(), PolicyError> {
    Vocabulary::standard().check(&task.prompt_tokens)?;
    if task.prompt_tokens.len() > max_prompt_len {
        return Err(PolicyError::InvalidTask(format!(
            "task {} prompt length {} exceeds {max_prompt_len}",
            task.id,
            task.prompt_tokens.len()
        )));
    }
    if task.target.kind() != task.kind {
        return Err(PolicyError::InvalidTask(format!(
            "task {} target is {} but kind is {}",
            task.id,
            task.target.kind(),
            task.kind
        )));
    }
    let bad = |e: crate::rewards::RewardError| PolicyError::InvalidTask(format!("task {}: {e}", task.id));
    match &task.target {
        Answer::Box(b) => b.validate().map_err(bad)?,
        Answer::Multibox(bs) => {
            for b in bs {
                b.validate().map_err(bad)?;
            }
        }
        Answer::Trajectory(t) => t.validate_target().map_err(bad)?,
        _ => {}
    }
    Ok(())
}

pub fn write_pool<W: Write>(mut w: W, pool: &[TaskInstance]) -> std::io::Result<()> {
    for t in pool {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a line-delimited pool, reporting the first malformed line.
pub fn read_pool<R: BufRead>(r: R, max_prompt_len: usize) -> Result<Vec<TaskInstance>, PolicyError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| PolicyError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskInstance = serde_json::from_str(&line)
            .map_err(|e| PolicyError::InvalidTask(format!("line {}: {e}", n + 1)))?;
        validate_task(&task, max_prompt_len)
            .map_err(|e| PolicyError::InvalidTask(format!("line {}: {e}", n + 1)))?;
        out.push(task);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::parse::{parse_output, render};

    #[test]
    fn mcq_has_four_options_and_uniform_letters() {
        let mut rng = RngStream::new(5, 0);
        let mut hist = [0usize; 4];
        for i in 0..1000 {
            let t = generate_task(i, TaskKind::Mcq, Dimension::Interaction, &mut rng);
            let opts = t
                .prompt_tokens
                .iter()
                .filter(|&&x| (vocab::LETTER_A..vocab::LETTER_A + 5).contains(&x))
                .count();
            assert_eq!(opts, 4);
            let Answer::Mcq(c) = t.target else { panic!() };
            hist[(c as u8 - b'A') as usize] += 1;
        }
        for h in hist {
            assert!((h as f64 / 1000.0 - 0.25).abs() < 0.05, "{hist:?}");
        }
    }

    #[test]
    fn box_target_is_block_bounds() {
        let mut rng = RngStream::new(1, 2);
        for _ in 0..50 {
            let t = generate_task(0, TaskKind::Box, Dimension::Perception, &mut rng);
            let p = &t.prompt_tokens;
            let (col, row) = (p[6] - vocab::DIGIT0, p[8] - vocab::DIGIT0);
            let expect = Box2D::new(
                f64::from(col) * 0.2,
                f64::from(row) * 0.2,
                f64::from(col + 2) * 0.2,
                f64::from(row + 2) * 0.2,
            )
            .unwrap();
            let Answer::Box(b) = t.target else { panic!() };
            for (a, e) in [(b.x_min, expect.x_min), (b.y_min, expect.y_min), (b.x_max, expect.x_max), (b.y_max, expect.y_max)] {
                assert!((a - e).abs() < 1e-12);
            }
        }
        let single = cell_box(3, 1);
        assert!((single.x_max - single.x_min - 0.2).abs() < 1e-12);
    }

    #[test]
    fn parse_render_round_trip_on_generated_targets() {
        let mut rng = RngStream::new(77, 1);
        for kind in TaskKind::ALL {
            for i in 0..200 {
                let t = generate_task(i, kind, default_dimension(kind), &mut rng);
                validate_task(&t, 64).unwrap();
                assert_eq!(parse_output(&render(&t.target), kind).unwrap(), t.target, "{kind}");
            }
        }
    }

    #[test]
    fn pool_file_round_trip_and_errors() {
        let mut rng = RngStream::new(3, 3);
        let pool = generate_pool(&TaskKind::ALL, 22, &mut rng);
        let mut buf = Vec::new();
        write_pool(&mut buf, &pool).unwrap();
        assert_eq!(read_pool(buf.as_slice(), 64).unwrap(), pool);
        let bad = b"{\"id\":1}\n";
        let err = read_pool(bad.as_slice(), 64).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
