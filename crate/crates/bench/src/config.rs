//! Flat key-value run configuration.

use std::fmt;
use std::str::FromStr;

use duoloc_core::estimator::EstimatorConfig;
use duoloc_core::geometry::Intrinsics;
use duoloc_core::refine::{LoStrategy, RefineConfig};
use duoloc_core::scoring::ScoringFunction;
use duoloc_core::sim::{CorruptionModel, FilterConfig, Layout, SceneSpec, SparsityConfig};
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// One localization method of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    P3P,
    E5p1,
    Adaptive { scoring: ScoringFunction, lo: LoStrategy },
    Select { alpha: f64 },
    Oracle,
}

impl Method {
    /// Whether the method needs the P3P and E5+1 results of the same query.
    pub fn needs_baselines(&self) -> bool {
        matches!(self, Method::Select { .. } | Method::Oracle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::P3P => write!(f, "p3p"),
            Method::E5p1 => write!(f, "e5p1"),
            Method::Adaptive { scoring, lo } => {
                let lo = match lo {
                    LoStrategy::Hybrid => "hybrid",
                    LoStrategy::Split => "split",
                };
                write!(f, "adaptive:{}:{lo}", scoring.name())
            }
            Method::Select { alpha } => write!(f, "select:{alpha}"),
            Method::Oracle => write!(f, "oracle"),
        }
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BenchError::Config(format!("unknown method `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["p3p"] => Ok(Method::P3P),
            ["e5p1"] => Ok(Method::E5p1),
            ["oracle"] => Ok(Method::Oracle),
            ["select", alpha] => Ok(Method::Select { alpha: alpha.parse().map_err(|_| bad())? }),
            ["adaptive", scoring, lo] => {
                let scoring = ScoringFunction::from_name(scoring).ok_or_else(bad)?;
                let lo = match *lo {
                    "hybrid" => LoStrategy::Hybrid,
                    "split" => LoStrategy::Split,
                    _ => return Err(bad()),
                };
                Ok(Method::Adaptive { scoring, lo })
            }
            _ => Err(bad()),
        }
    }
}

/// Every setting of a run. Grid keys (`grid_*`) list the values swept over;
/// a sweep runs the Cartesian product of all grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub scene_id: String,

    pub layout: String,
    pub num_db: usize,
    pub num_points: usize,
    pub num_queries: usize,
    pub spacing: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub max_view_depth: f64,
    pub query_offset: f64,
    pub query_yaw_deg: f64,
    pub lateral_jitter: f64,
    pub min_shared_points: usize,
    pub min_shared_images: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,

    pub t3d: f64,
    pub t2d: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub scoring: String,
    pub lo_strategy: String,
    pub lo_max_iterations: usize,
    pub lo_relative_cost_tolerance: f64,
    pub lo_initial_damping: f64,
    pub select_alpha: f64,

    pub pixel_sigma: f64,
    pub outlier_ratio: f64,
    pub point_noise: f64,
    pub depth_bias: f64,
    pub drop_3d_fraction: f64,
    pub lift_outlier_ratio: f64,

    pub keep_every_n: usize,

    pub retrieval_k: usize,
    pub filter: bool,
    pub filter_re_thr: f64,
    pub filter_min_count: usize,
    pub filter_rel_thr: f64,

    pub methods: Vec<String>,
    /// Method whose estimates extend the database in continuous runs.
    pub continuous_method: String,
    pub grid_keep_every_n: Vec<usize>,
    pub grid_depth_bias: Vec<f64>,
    pub grid_point_noise: Vec<f64>,
    pub grid_filter: Vec<bool>,

    /// Record per-query wall-clock time; off keeps outputs reproducible.
    pub record_timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let est = EstimatorConfig::default();
        let spec = SceneSpec::street(200, 3000, 200, 0);
        Self {
            seed: 0,
            scene_id: "street".into(),
            layout: "street".into(),
            num_db: spec.num_db,
            num_points: spec.num_points,
            num_queries: spec.num_queries,
            spacing: spec.spacing,
            depth_min: spec.depth_min,
            depth_max: spec.depth_max,
            max_view_depth: spec.max_view_depth,
            query_offset: spec.query_offset,
            query_yaw_deg: spec.query_yaw_deg,
            lateral_jitter: spec.lateral_jitter,
            min_shared_points: spec.min_shared_points,
            min_shared_images: spec.min_shared_images,
            fx: spec.intrinsics.fx,
            fy: spec.intrinsics.fy,
            cx: spec.intrinsics.cx,
            cy: spec.intrinsics.cy,
            t3d: est.t3d,
            t2d: est.t2d,
            max_iterations: est.max_iterations,
            confidence: est.confidence,
            scoring: est.scoring.name().into(),
            lo_strategy: "hybrid".into(),
            lo_max_iterations: est.lo.max_iterations,
            lo_relative_cost_tolerance: est.lo.relative_cost_tolerance,
            lo_initial_damping: est.lo.initial_damping,
            select_alpha: est.select_alpha,
            pixel_sigma: 1.0,
            outlier_ratio: 0.2,
            point_noise: 0.0,
            depth_bias: 0.0,
            drop_3d_fraction: 0.0,
            lift_outlier_ratio: 0.0,
            keep_every_n: 1,
            retrieval_k: 20,
            filter: false,
            filter_re_thr: 2.0,
            filter_min_count: 3,
            filter_rel_thr: 0.8,
            methods: vec![
                "p3p".into(),
                "e5p1".into(),
                "adaptive:mult_msac:hybrid".into(),
                "select:0.8".into(),
                "oracle".into(),
            ],
            continuous_method: "adaptive:mult_msac:hybrid".into(),
            grid_keep_every_n: Vec::new(),
            grid_depth_bias: Vec::new(),
            grid_point_noise: Vec::new(),
            grid_filter: Vec::new(),
            record_timing: false,
        }
    }
}

/// One grid cell: the values that vary across a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub keep_every_n: usize,
    pub depth_bias: f64,
    pub point_noise: f64,
    pub filter: bool,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("n{}_db{}_pn{}_f{}", self.keep_every_n, self.depth_bias, self.point_noise, u8::from(self.filter))
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let err = |m: &str| Err(BenchError::Config(m.into()));
        if !(self.t3d > 0.0 && self.t2d > 0.0) {
            return err("thresholds must be positive");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return err("confidence must lie in (0, 1)");
        }
        if self.keep_every_n == 0 || self.grid_keep_every_n.contains(&0) {
            return err("keep_every_n must be at least 1");
        }
        if self.retrieval_k == 0 {
            return err("retrieval_k must be at least 1");
        }
        if !(self.filter_re_thr > 0.0) {
            return err("filter_re_thr must be positive");
        }
        let fractions = [self.outlier_ratio, self.drop_3d_fraction, self.lift_outlier_ratio];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return err("fractions must lie in [0, 1]");
        }
        if self.pixel_sigma < 0.0 || self.point_noise < 0.0 || self.depth_bias < 0.0 {
            return err("noise levels must be non-negative");
        }
        self.layout()?;
        self.estimator()?;
        self.methods()?;
        self.continuous_method()?;
        self.scene_spec()?;
        Ok(())
    }

    pub fn layout(&self) -> Result<Layout, BenchError> {
        match self.layout.as_str() {
            "street" => Ok(Layout::Street),
            "room" => Ok(Layout::Room),
            other => Err(BenchError::Config(format!("unknown layout `{other}`"))),
        }
    }

    pub fn scene_spec(&self) -> Result<SceneSpec, BenchError> {
        let intrinsics =
            Intrinsics::new(self.fx, self.fy, self.cx, self.cy).map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(SceneSpec {
            num_db: self.num_db,
            num_points: self.num_points,
            num_queries: self.num_queries,
            layout: self.layout()?,
            seed: self.seed,
            intrinsics,
            spacing: self.spacing,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            max_view_depth: self.max_view_depth,
            query_offset: self.query_offset,
            query_yaw_deg: self.query_yaw_deg,
            lateral_jitter: self.lateral_jitter,
            min_shared_points: self.min_shared_points,
            min_shared_images: self.min_shared_images,
        })
    }

    pub fn estimator(&self) -> Result<EstimatorConfig, BenchError> {
        let scoring = ScoringFunction::from_name(&self.scoring)
            .ok_or_else(|| BenchError::Config(format!("unknown scoring `{}`", self.scoring)))?;
        let strategy = match self.lo_strategy.as_str() {
            "hybrid" => LoStrategy::Hybrid,
            "split" => LoStrategy::Split,
            other => return Err(BenchError::Config(format!("unknown lo_strategy `{other}`"))),
        };
        Ok(EstimatorConfig {
            t3d: self.t3d,
            t2d: self.t2d,
            max_iterations: self.max_iterations,
            confidence: self.confidence,
            scoring,
            lo: RefineConfig {
                strategy,
                max_iterations: self.lo_max_iterations,
                relative_cost_tolerance: self.lo_relative_cost_tolerance,
                initial_damping: self.lo_initial_damping,
            },
            select_alpha: self.select_alpha,
            rng_seed: self.seed,
        })
    }

    pub fn methods(&self) -> Result<Vec<Method>, BenchError> {
        if self.methods.is_empty() {
            return Err(BenchError::Config("no methods configured".into()));
        }
        self.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn continuous_method(&self) -> Result<Method, BenchError> {
        let m: Method = self.continuous_method.parse()?;
        if m.needs_baselines() {
            return Err(BenchError::Config("continuous_method must be p3p, e5p1 or adaptive".into()));
        }
        Ok(m)
    }

    /// Corruption of one cell: the base model with the cell's geometry noise.
    pub fn corruption(&self, cell: &Cell) -> CorruptionModel {
        CorruptionModel {
            pixel_sigma: self.pixel_sigma,
            outlier_ratio: self.outlier_ratio,
            point_noise: cell.point_noise,
            depth_bias: cell.depth_bias,
            drop_3d_fraction: self.drop_3d_fraction,
            lift_outlier_ratio: self.lift_outlier_ratio,
        }
    }

    pub fn sparsity(&self, cell: &Cell) -> SparsityConfig {
        SparsityConfig { keep_every_n: cell.keep_every_n }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            re_thr: self.filter_re_thr,
            min_count: self.filter_min_count,
            denom: self.retrieval_k,
            rel_thr: (self.filter_rel_thr > 0.0).then_some(self.filter_rel_thr),
        }
    }

    /// The base cell (no grids) followed by the product of all grids.
    pub fn cells(&self) -> Vec<Cell> {
        let or = |grid: &Vec<usize>, v: usize| if grid.is_empty() { vec![v] } else { grid.clone() };
        let orf = |grid: &Vec<f64>, v: f64| if grid.is_empty() { vec![v] } else { grid.clone() };
        let filters = if self.grid_filter.is_empty() { vec![self.filter] } else { self.grid_filter.clone() };
        let mut cells = Vec::new();
        for &keep_every_n in &or(&self.grid_keep_every_n, self.keep_every_n) {
            for &depth_bias in &orf(&self.grid_depth_bias, self.depth_bias) {
                for &point_noise in &orf(&self.grid_point_noise, self.point_noise) {
                    for &filter in &filters {
                        cells.push(Cell { keep_every_n, depth_bias, point_noise, filter });
                    }
                }
            }
        }
        cells
    }

    /// Compact `key=value;...` echo of the whole configuration.
    pub fn echo(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let table = value.as_table().expect("config is a table");
        table.iter().map(|(k, v)| format!("{k}={}", v.to_string().replace(',', " "))).collect::<Vec<_>>().join(";")
    }
}
