//! Observed-entry stores for the rating and auxiliary matrices: loading,
//! id mapping, canonical serialization, and train/validation/test splits.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ContextId;

/// Environment variable naming the directory relative dataset paths resolve against.
pub const DATA_ROOT_ENV: &str = "DACONA_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// The observed entries of one sparse matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTriplets {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Entry>,
}

impl SparseTriplets {
    /// Validates bounds, finiteness and uniqueness of `(row, col)` pairs.
    pub fn new(n_rows: usize, n_cols: usize, entries: Vec<Entry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.row >= n_rows {
                return Err(Error::IndexOutOfRange { what: "row", index: e.row, count: n_rows });
            }
            if e.col >= n_cols {
                return Err(Error::IndexOutOfRange { what: "column", index: e.col, count: n_cols });
            }
            if !e.value.is_finite() {
                return Err(Error::NonFinite(format!("entry ({}, {})", e.row, e.col)));
            }
            if !seen.insert((e.row, e.col)) {
                return Err(Error::Config(format!("duplicate entry ({}, {})", e.row, e.col)));
            }
        }
        Ok(SparseTriplets { n_rows, n_cols, entries })
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        SparseTriplets { n_rows, n_cols, entries: Vec::new() }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Widens the entity counts, e.g. to pin published dataset shapes.
    pub fn with_counts(mut self, n_rows: usize, n_cols: usize) -> Result<Self> {
        if n_rows < self.n_rows || n_cols < self.n_cols {
            return Err(Error::Config(format!(
                "count override {n_rows}x{n_cols} is smaller than observed {}x{}",
                self.n_rows, self.n_cols
            )));
        }
        self.n_rows = n_rows;
        self.n_cols = n_cols;
        Ok(self)
    }

    fn subset(&self, idx: &[usize]) -> SparseTriplets {
        SparseTriplets {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            entries: idx.iter().map(|&i| self.entries[i]).collect(),
        }
    }

    pub fn global_mean(&self) -> Result<f64> {
        if self.entries.is_empty() {
            return Err(Error::Empty("global_mean over zero entries"));
        }
        Ok(self.entries.iter().map(|e| e.value).sum::<f64>() / self.entries.len() as f64)
    }

    /// Mean of the observed entries of each column; `None` for unobserved columns.
    pub fn column_means(&self) -> Result<Vec<Option<f64>>> {
        if self.entries.is_empty() {
            return Err(Error::Empty("column_means over zero entries"));
        }
        let mut sums = vec![0.0; self.n_cols];
        let mut counts = vec![0usize; self.n_cols];
        for e in &self.entries {
            sums[e.col] += e.value;
            counts[e.col] += 1;
        }
        Ok(sums.into_iter().zip(counts).map(|(s, c)| (c > 0).then(|| s / c as f64)).collect())
    }

    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_rows];
        for e in &self.entries {
            counts[e.row] += 1;
        }
        counts
    }

    pub fn col_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_cols];
        for e in &self.entries {
            counts[e.col] += 1;
        }
        counts
    }

    /// Writes `row<TAB>col<TAB>value` lines.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            writeln!(w, "{}\t{}\t{}", e.row, e.col, e.value).map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletFormat {
    /// `row<TAB>col<TAB>value` with dense zero-based indices.
    TsvTriplet,
    /// `user item rating [timestamp]`, whitespace separated (MovieLens `u.data`, FilmTrust `ratings.txt`).
    MovielensUdata,
    /// MovieLens `u.item`: pipe separated, item id first and genre flags last.
    MovielensUitemGenres,
    /// `truster trustee [weight]`; every edge becomes value 1.0.
    TrustEdges,
}

impl FromStr for TripletFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv_triplet" => Ok(TripletFormat::TsvTriplet),
            "movielens_udata" => Ok(TripletFormat::MovielensUdata),
            "movielens_uitem_genres" => Ok(TripletFormat::MovielensUitemGenres),
            "trust_edges" => Ok(TripletFormat::TrustEdges),
            other => Err(Error::Config(format!("unknown triplet format `{other}`"))),
        }
    }
}

impl fmt::Display for TripletFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TripletFormat::TsvTriplet => "tsv_triplet",
            TripletFormat::MovielensUdata => "movielens_udata",
            TripletFormat::MovielensUitemGenres => "movielens_uitem_genres",
            TripletFormat::TrustEdges => "trust_edges",
        })
    }
}

/// Dense indices assigned to original ids in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn original(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Writes `original_id<TAB>index` lines.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, id) in self.ids.iter().enumerate() {
            writeln!(w, "{id}\t{i}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A loaded matrix with the id maps that produced its indices.
#[derive(Debug, Clone)]
pub struct LoadedMatrix {
    pub triplets: SparseTriplets,
    pub row_ids: IdMap,
    pub col_ids: IdMap,
    /// Number of `(row, col)` pairs that appeared more than once; the last occurrence wins.
    pub duplicates: usize,
}

pub fn load_triplets(path: &Path, format: TripletFormat) -> Result<LoadedMatrix> {
    let mut row_ids = IdMap::new();
    let mut col_ids = IdMap::new();
    let (triplets, duplicates) = load_triplets_with(path, format, &mut row_ids, &mut col_ids)?;
    Ok(LoadedMatrix { triplets, row_ids, col_ids, duplicates })
}

/// Loads a file, resolving ids through (and extending) the given maps so
/// that an auxiliary matrix can share its row entities with the ratings.
///
/// `tsv_triplet` indices are taken literally and leave the maps untouched.
pub fn load_triplets_with(
    path: &Path,
    format: TripletFormat,
    row_ids: &mut IdMap,
    col_ids: &mut IdMap,
) -> Result<(SparseTriplets, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    // u.item ships as latin-1, so read bytes and decode lossily per line.
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    let mut builder = Builder::default();
    let mut lineno = 0;
    loop {
        raw.clear();
        let n = reader.read_until(b'\n', &mut raw).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let line = String::from_utf8_lossy(&raw);
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse { path: path.to_path_buf(), line: lineno, message };
        match format {
            TripletFormat::TsvTriplet => {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 3 {
                    return Err(bad(format!("expected 3 tab-separated fields, got {}", f.len())));
                }
                let row = f[0].parse().map_err(|_| bad(format!("bad row index `{}`", f[0])))?;
                let col = f[1].parse().map_err(|_| bad(format!("bad column index `{}`", f[1])))?;
                let value = parse_value(f[2]).map_err(bad)?;
                builder.push(row, col, value);
            }
            TripletFormat::MovielensUdata => {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() < 3 {
                    return Err(bad(format!("expected at least 3 fields, got {}", f.len())));
                }
                let value = parse_value(f[2]).map_err(bad)?;
                builder.push(row_ids.get_or_insert(f[0]), col_ids.get_or_insert(f[1]), value);
            }
            TripletFormat::MovielensUitemGenres => {
                let f: Vec<&str> = line.split('|').collect();
                if f.len() < 6 {
                    return Err(bad(format!("expected id, metadata and genre flags, got {} fields", f.len())));
                }
                let n_genres = builder.genre_width.get_or_insert(f.len() - 5);
                if f.len() - 5 != *n_genres {
                    return Err(bad(format!("expected {} genre flags, got {}", n_genres, f.len() - 5)));
                }
                let row = row_ids.get_or_insert(f[0]);
                for (g, flag) in f[f.len() - *n_genres..].iter().enumerate() {
                    let value = match *flag {
                        "0" => 0.0,
                        "1" => 1.0,
                        other => return Err(bad(format!("genre flag must be 0 or 1, got `{other}`"))),
                    };
                    let col = col_ids.get_or_insert(&g.to_string());
                    builder.push(row, col, value);
                }
            }
            TripletFormat::TrustEdges => {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() < 2 {
                    return Err(bad(format!("expected truster and trustee, got {} fields", f.len())));
                }
                builder.push(row_ids.get_or_insert(f[0]), col_ids.get_or_insert(f[1]), 1.0);
            }
        }
    }
    if builder.duplicates > 0 {
        log::warn!("{}: {} duplicate entries, last occurrence kept", path.display(), builder.duplicates);
    }
    let (n_rows, n_cols) = match format {
        TripletFormat::TsvTriplet => (builder.max_row, builder.max_col),
        _ => (row_ids.len(), col_ids.len()),
    };
    let duplicates = builder.duplicates;
    Ok((SparseTriplets::new(n_rows, n_cols, builder.entries)?, duplicates))
}

fn parse_value(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad value `{s}`"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value `{s}`"));
    }
    Ok(v)
}

#[derive(Default)]
struct Builder {
    entries: Vec<Entry>,
    position: HashMap<(usize, usize), usize>,
    duplicates: usize,
    max_row: usize,
    max_col: usize,
    genre_width: Option<usize>,
}

impl Builder {
    fn push(&mut self, row: usize, col: usize, value: f64) {
        self.max_row = self.max_row.max(row + 1);
        self.max_col = self.max_col.max(col + 1);
        match self.position.get(&(row, col)) {
            Some(&at) => {
                self.entries[at].value = value;
                self.duplicates += 1;
            }
            None => {
                self.position.insert((row, col), self.entries.len());
                self.entries.push(Entry { row, col, value });
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac_of_train: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.8, val_frac_of_train: 0.02, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_frac > 0.0 && self.train_frac <= 1.0) {
            return Err(Error::Config(format!("train_frac must be in (0, 1], got {}", self.train_frac)));
        }
        if !(0.0..1.0).contains(&self.val_frac_of_train) {
            return Err(Error::Config(format!("val_frac_of_train must be in [0, 1), got {}", self.val_frac_of_train)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: SparseTriplets,
    pub val: SparseTriplets,
    pub test: SparseTriplets,
}

/// Uniform entrywise split. Each part keeps the input's relative entry order.
pub fn split(ratings: &SparseTriplets, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n = ratings.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_fit = (spec.train_frac * n as f64).round() as usize;
    let n_val = (spec.val_frac_of_train * n_fit as f64).round() as usize;
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..n_fit].to_vec();
    let mut test: Vec<usize> = order[n_fit..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train: ratings.subset(&train), val: ratings.subset(&val), test: ratings.subset(&test) })
}

/// Ratings plus optional item-coupled (`Y`) and user-coupled (`Z`) auxiliary matrices.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub ratings: SparseTriplets,
    pub item_aux: Option<SparseTriplets>,
    pub user_aux: Option<SparseTriplets>,
    pub users: IdMap,
    pub items: IdMap,
    pub item_aux_entities: IdMap,
    pub user_aux_entities: IdMap,
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        if let Some(y) = &self.item_aux {
            if y.n_rows() != self.ratings.n_cols() {
                return Err(Error::Config(format!(
                    "item auxiliary matrix has {} rows but ratings have {} items",
                    y.n_rows(),
                    self.ratings.n_cols()
                )));
            }
        }
        if let Some(z) = &self.user_aux {
            if z.n_rows() != self.ratings.n_rows() {
                return Err(Error::Config(format!(
                    "user auxiliary matrix has {} rows but ratings have {} users",
                    z.n_rows(),
                    self.ratings.n_rows()
                )));
            }
        }
        Ok(())
    }
}

/// The matrices one training run fits: the training part of the ratings
/// plus whichever auxiliary matrices are in use. Auxiliary matrices are
/// never split.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub ratings: SparseTriplets,
    pub item_aux: Option<SparseTriplets>,
    pub user_aux: Option<SparseTriplets>,
}

impl TrainingData {
    pub fn matrix(&self, ctx: ContextId) -> Option<&SparseTriplets> {
        match ctx {
            ContextId::RatingX => Some(&self.ratings),
            ContextId::ItemAuxY => self.item_aux.as_ref(),
            ContextId::UserAuxZ => self.user_aux.as_ref(),
        }
    }

    pub fn from_bundle(bundle: &DatasetBundle, train: SparseTriplets) -> Self {
        TrainingData { ratings: train, item_aux: bundle.item_aux.clone(), user_aux: bundle.user_aux.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSource {
    pub path: PathBuf,
    pub format: TripletFormat,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountOverrides {
    pub users: Option<usize>,
    pub items: Option<usize>,
    pub item_aux: Option<usize>,
    pub user_aux: Option<usize>,
}

/// A small TOML file naming the files of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub name: String,
    pub ratings: MatrixSource,
    pub item_aux: Option<MatrixSource>,
    pub user_aux: Option<MatrixSource>,
    #[serde(default)]
    pub counts: CountOverrides,
}

impl DatasetDescriptor {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads every matrix, resolving relative paths against `root`.
    pub fn load(&self, root: &Path) -> Result<DatasetBundle> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        let mut users = IdMap::new();
        let mut items = IdMap::new();
        let (ratings, _) =
            load_triplets_with(&resolve(&self.ratings.path), self.ratings.format, &mut users, &mut items)?;

        let mut item_aux_entities = IdMap::new();
        let item_aux = match &self.item_aux {
            Some(src) => {
                Some(load_triplets_with(&resolve(&src.path), src.format, &mut items, &mut item_aux_entities)?.0)
            }
            None => None,
        };
        let mut user_aux_entities = IdMap::new();
        let user_aux = match &self.user_aux {
            Some(src) => {
                Some(load_triplets_with(&resolve(&src.path), src.format, &mut users, &mut user_aux_entities)?.0)
            }
            None => None,
        };

        // Aux files may introduce entities unseen in the ratings; widen everything to the final maps.
        let widen = |t: SparseTriplets, rows: Option<usize>, cols: Option<usize>| -> Result<SparseTriplets> {
            let r = rows.unwrap_or(t.n_rows()).max(t.n_rows());
            let c = cols.unwrap_or(t.n_cols()).max(t.n_cols());
            t.with_counts(r, c)
        };
        let n_users = self.counts.users.unwrap_or(0).max(users.len()).max(ratings.n_rows());
        let n_items = self.counts.items.unwrap_or(0).max(items.len()).max(ratings.n_cols());
        let ratings = widen(ratings, Some(n_users), Some(n_items))?;
        let item_aux = item_aux
            .map(|y| {
                let c = self.counts.item_aux.unwrap_or(0).max(y.n_cols());
                widen(y, Some(n_items), Some(c))
            })
            .transpose()?;
        let user_aux = user_aux
            .map(|z| {
                let c = self.counts.user_aux.unwrap_or(0).max(z.n_cols());
                widen(z, Some(n_users), Some(c))
            })
            .transpose()?;

        let bundle = DatasetBundle { ratings, item_aux, user_aux, users, items, item_aux_entities, user_aux_entities };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// `$DACONA_DATA_ROOT`, falling back to `./data`.
pub fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}
