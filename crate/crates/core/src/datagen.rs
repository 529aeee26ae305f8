//! Synthetic decoded-CAN trips and labelled collision events.
//!
//! The generator is driven by feature names: every feature of the reference
//! schema has a dedicated model (kinematics, driver inputs, safety flags,
//! slow thermal/fuel state), and anything it does not recognise falls back to
//! a bounded random walk (continuous) or a sticky random state (enumerated).
//! Each trip is generated from its own seed stream, so corpora are identical
//! regardless of thread count.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use rayon::prelude::*;

use crate::frames::{DecodedFrame, RawValue, TripLog};
use crate::rng;
use crate::schema::{FeatureKind, FeatureSpec, SignalSchema};

/// Collision location, clockwise from the front.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Impact {
    Front,
    FrontRight,
    Right,
    RearRight,
    Rear,
    RearLeft,
    Left,
    FrontLeft,
}

impl Impact {
    pub const ALL: [Impact; 8] = [
        Impact::Front,
        Impact::FrontRight,
        Impact::Right,
        Impact::RearRight,
        Impact::Rear,
        Impact::RearLeft,
        Impact::Left,
        Impact::FrontLeft,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Impact::Front => "front",
            Impact::FrontRight => "front-right",
            Impact::Right => "right",
            Impact::RearRight => "rear-right",
            Impact::Rear => "rear",
            Impact::RearLeft => "rear-left",
            Impact::Left => "left",
            Impact::FrontLeft => "front-left",
        }
    }

    pub fn from_name(name: &str) -> Option<Impact> {
        Impact::ALL.into_iter().find(|i| i.name() == name)
    }

    /// Direction of the impact point, degrees clockwise from straight ahead.
    pub fn angle_deg(self) -> f64 {
        45.0 * self.index() as f64
    }
}

/// Observed share of each impact location in real fleet collision data,
/// indexed like [`Impact::ALL`].
pub const FLEET_IMPACT_SHARES: [f64; 8] = [0.186, 0.153, 0.066, 0.074, 0.217, 0.096, 0.070, 0.138];

#[derive(Debug, Clone, PartialEq)]
pub struct EventLabel {
    pub vehicle_id: Arc<str>,
    pub trip_id: Arc<str>,
    /// Index of the non-overlapping window within its trip.
    pub window: usize,
    /// `Some` exactly for collision windows.
    pub impact: Option<Impact>,
}

impl EventLabel {
    pub fn is_collision(&self) -> bool {
        self.impact.is_some()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("schema lacks feature `{0}` needed for collision signatures")]
    MissingFeature(&'static str),
    #[error("rebalance needs at least one positive and one negative window")]
    SingleClass,
    #[error("ratio {requested} unattainable; at most {achievable:.3} negatives per positive available")]
    Unattainable { requested: f64, achievable: f64 },
    #[error("labels file: {0}")]
    Csv(#[from] csv::Error),
    #[error("labels file line {line}: {reason}")]
    BadLabel { line: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub vehicles: usize,
    pub trips_per_vehicle: usize,
    pub trip_length_s: usize,
    /// Per-value probability of a missing reading.
    pub missing_rate: f64,
    /// Per-value probability of a decoder error.
    pub error_rate: f64,
    /// Per-value probability of a reading outside the sensor range.
    pub outlier_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vehicles: 100,
            trips_per_vehicle: 15,
            trip_length_s: 300,
            missing_rate: 0.001,
            error_rate: 0.0005,
            outlier_rate: 0.0002,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CollisionConfig {
    /// Fraction of windows that receive a collision.
    pub rate: f64,
    /// Velocity change range (m/s) of the impact pulse.
    pub delta_v: (f64, f64),
    /// Standard deviation (degrees) of the impact direction around its
    /// sector centre; larger values blur neighbouring classes.
    pub angle_jitter_deg: f64,
    /// Relative frequency of each impact location.
    pub impact_weights: [f64; 8],
}

impl Default for CollisionConfig {
    fn default() -> Self {
        CollisionConfig {
            rate: 0.01,
            delta_v: (10.0, 20.0),
            angle_jitter_deg: 12.0,
            impact_weights: FLEET_IMPACT_SHARES,
        }
    }
}

fn vehicle_id(v: usize) -> Arc<str> {
    Arc::from(format!("veh{v:05}"))
}

fn trip_id(t: usize) -> Arc<str> {
    Arc::from(format!("trip{t:03}"))
}

/// Per-vehicle traits that persist across its trips.
struct VehicleProfile {
    aggression: f64,
    highway_speed: f64,
    idle_rpm: f64,
    uses_cruise: bool,
    hill_hold: bool,
    check_engine: bool,
    drive_mode: &'static str,
    fuel: f64,
}

impl VehicleProfile {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        VehicleProfile {
            aggression: rng.gen_range(0.7..1.4),
            highway_speed: rng.gen_range(95.0..130.0),
            idle_rpm: rng.gen_range(650.0..850.0),
            uses_cruise: rng.gen_bool(0.5),
            hill_hold: rng.gen_bool(0.5),
            check_engine: rng.gen_bool(0.05),
            drive_mode: ["Eco", "Normal", "Normal", "Sport"][rng.gen_range(0..4)],
            fuel: rng.gen_range(15.0..95.0),
        }
    }
}

/// Every modelled signal at one time step. Enumerated signals carry state
/// names so they map onto any schema that declares those names.
#[derive(Debug, Clone, Default)]
struct Signals {
    speed: f64,
    accel_longitudinal: f64,
    accel_lateral: f64,
    yaw_rate: f64,
    engine_rpm: f64,
    steering_angle: f64,
    throttle_position: f64,
    brake_pressure: f64,
    fuel_level: f64,
    coolant_temp: f64,
    brake_switch: &'static str,
    gear: &'static str,
    turn_signal: &'static str,
    cruise_control: &'static str,
    horn: &'static str,
    wiper: &'static str,
    headlights: &'static str,
    fog_lights: &'static str,
    parking_brake: &'static str,
    hill_hold: &'static str,
    airbag_deployed: &'static str,
    collision_warning: &'static str,
    abs_active: &'static str,
    esc_active: &'static str,
    tcs_active: &'static str,
    seatbelt_driver: &'static str,
    seatbelt_passenger: &'static str,
    lane_departure_warning: &'static str,
    emergency_brake_assist: &'static str,
    doors: [&'static str; 4],
    window_driver: &'static str,
    trunk: &'static str,
    ignition: &'static str,
    occupancy: &'static str,
    drive_mode: &'static str,
    hvac_mode: &'static str,
    rear_defrost: &'static str,
    check_engine: &'static str,
    low_fuel_warning: &'static str,
}

fn on(b: bool) -> &'static str {
    if b {
        "On"
    } else {
        "Off"
    }
}

fn open(b: bool) -> &'static str {
    if b {
        "Open"
    } else {
        "Closed"
    }
}

impl Signals {
    fn continuous(&self, name: &str) -> Option<f64> {
        Some(match name {
            "speed" => self.speed,
            "accel_longitudinal" => self.accel_longitudinal,
            "accel_lateral" => self.accel_lateral,
            "yaw_rate" => self.yaw_rate,
            "engine_rpm" => self.engine_rpm,
            "steering_angle" => self.steering_angle,
            "throttle_position" => self.throttle_position,
            "brake_pressure" => self.brake_pressure,
            "fuel_level" => self.fuel_level,
            "coolant_temp" => self.coolant_temp,
            _ => return None,
        })
    }

    fn state(&self, name: &str) -> Option<&'static str> {
        Some(match name {
            "brake_switch" => self.brake_switch,
            "gear" => self.gear,
            "turn_signal" => self.turn_signal,
            "cruise_control" => self.cruise_control,
            "horn" => self.horn,
            "wiper" => self.wiper,
            "headlights" => self.headlights,
            "fog_lights" => self.fog_lights,
            "parking_brake" => self.parking_brake,
            "hill_hold" => self.hill_hold,
            "airbag_deployed" => self.airbag_deployed,
            "collision_warning" => self.collision_warning,
            "abs_active" => self.abs_active,
            "esc_active" => self.esc_active,
            "tcs_active" => self.tcs_active,
            "seatbelt_driver" => self.seatbelt_driver,
            "seatbelt_passenger" => self.seatbelt_passenger,
            "lane_departure_warning" => self.lane_departure_warning,
            "emergency_brake_assist" => self.emergency_brake_assist,
            "door_front_left" => self.doors[0],
            "door_front_right" => self.doors[1],
            "door_rear_left" => self.doors[2],
            "door_rear_right" => self.doors[3],
            "window_driver" => self.window_driver,
            "trunk" => self.trunk,
            "ignition" => self.ignition,
            "occupancy" => self.occupancy,
            "drive_mode" => self.drive_mode,
            "hvac_mode" => self.hvac_mode,
            "rear_defrost" => self.rear_defrost,
            "check_engine" => self.check_engine,
            "low_fuel_warning" => self.low_fuel_warning,
            _ => return None,
        })
    }
}

fn gear_for(speed: f64, current: usize) -> usize {
    const UP: [f64; 5] = [18.0, 32.0, 50.0, 68.0, 88.0];
    const DOWN: [f64; 5] = [12.0, 26.0, 42.0, 60.0, 80.0];
    let mut g = current.clamp(1, 6);
    while g < 6 && speed > UP[g - 1] {
        g += 1;
    }
    while g > 1 && speed < DOWN[g - 2] {
        g -= 1;
    }
    g
}

const GEAR_NAMES: [&str; 7] = ["N", "1", "2", "3", "4", "5", "6"];
const RPM_PER_KMH: [f64; 7] = [0.0, 105.0, 62.0, 44.0, 34.0, 28.0, 23.0];

/// Sensor noise levels; the inertial and steering channels are sampled
/// instantaneously once per frame and so carry vibration noise.
const ACCEL_NOISE: f64 = 1.0;
const YAW_NOISE: f64 = 6.0;
const STEERING_NOISE: f64 = 60.0;

/// Simulates the modelled signals of one trip.
fn simulate_trip(profile: &VehicleProfile, frames: usize, dt: f64, rng: &mut ChaCha8Rng) -> Vec<Signals> {
    let noise = |rng: &mut ChaCha8Rng, s: f64| Normal::new(0.0, s).expect("positive std").sample(rng);

    let ambient: f64 = rng.gen_range(-5.0..32.0);
    let rain = [0, 0, 0, 1, 2][rng.gen_range(0..5)];
    let night = rng.gen_bool(0.3);
    let occupants = [1, 1, 1, 2, 2, 3, 4, 5][rng.gen_range(0..8)];
    let parked_start = rng.gen_range(3..8).min(frames / 4);
    let parked_end = rng.gen_range(3..8).min(frames / 4);
    let trunk_used = rng.gen_bool(0.15);
    let window_open = ambient > 18.0 && rng.gen_bool(0.3);
    let hvac = if ambient < 8.0 {
        "Heat"
    } else if ambient > 24.0 {
        "Cool"
    } else {
        ["Off", "Auto"][rng.gen_range(0..2)]
    };
    let mut fuel = (profile.fuel - rng.gen_range(0.0..10.0)).max(3.0);
    let mut coolant = ambient + rng.gen_range(0.0..50.0);
    let coolant_target = rng.gen_range(86.0..96.0);

    let mut out = Vec::with_capacity(frames);
    let mut speed: f64 = 0.0;
    let mut target: f64 = 0.0;
    let mut segment_left = 0usize;
    let mut highway = false;
    let mut drift = 0.0;
    let mut yaw_target = 0.0;
    let mut turn_left = 0usize;
    let mut yaw: f64 = 0.0;
    let mut gear = 1usize;
    let mut hard_brake = 0usize;
    let mut hard_decel = 0.0;
    let mut signal_left = 0usize;
    let mut signal_state = "Off";
    let mut ldw_left = 0usize;
    let mut cruise = "Off";
    let mut prev_throttle = 0.0;
    let mut prev_brake = 0.0;

    for t in 0..frames {
        let parked = t < parked_start || t + parked_end >= frames;
        let time = t as f64 * dt;
        let mut s = Signals {
            occupancy: ["1", "2", "3", "4", "5"][occupants - 1],
            drive_mode: profile.drive_mode,
            wiper: ["Off", "Low", "High"][rain],
            headlights: if night {
                if highway && rng.gen_bool(0.3) {
                    "High"
                } else {
                    "Low"
                }
            } else {
                "Off"
            },
            fog_lights: on(night && rain == 2),
            hvac_mode: hvac,
            rear_defrost: on(ambient < 5.0 && time < 120.0),
            check_engine: on(profile.check_engine),
            airbag_deployed: "Off",
            horn: on(rng.gen_bool(0.0005)),
            trunk: "Closed",
            doors: ["Closed"; 4],
            hill_hold: "Off",
            ..Signals::default()
        };

        let accel;
        if parked {
            accel = -speed / 3.6 / dt;
            speed = 0.0;
            s.gear = "P";
            s.parking_brake = "Applied";
            let edge = t < 2 || t + 2 >= frames;
            s.ignition = if t == 0 || t + 1 == frames { "Acc" } else { "On" };
            s.doors = [
                open(edge),
                open(edge && occupants >= 2),
                open(edge && occupants >= 3),
                open(edge && occupants >= 4),
            ];
            s.trunk = open(trunk_used && t + 4 >= frames);
            cruise = "Off";
            hard_brake = 0;
        } else {
            s.ignition = "On";
            s.parking_brake = "Released";
            // leave room to come to a stop before parking
            let remaining = (frames - parked_end - t) as f64 * dt;
            let stopping = remaining < speed / 3.6 / 2.0 + 4.0;
            if segment_left == 0 && !stopping {
                (target, highway) = match rng.gen_range(0..10) {
                    0 | 1 => (0.0, false),
                    2..=4 => (rng.gen_range(25.0..50.0), false),
                    5..=7 => (rng.gen_range(50.0..80.0), false),
                    _ => (profile.highway_speed + rng.gen_range(-10.0..10.0), true),
                };
                let secs = if target == 0.0 {
                    rng.gen_range(8.0..30.0)
                } else {
                    rng.gen_range(20.0..90.0)
                };
                segment_left = (secs / dt).ceil() as usize;
            }
            if stopping {
                (target, highway) = (0.0, false);
                hard_brake = 0;
            }
            segment_left = segment_left.saturating_sub(1);
            if hard_brake == 0 && !stopping && speed > 30.0 && rng.gen_bool(0.002) {
                hard_brake = rng.gen_range(1..3);
                hard_decel = rng.gen_range(4.5..7.5);
            }
            let a_max = 2.5 * profile.aggression;
            let b_max = 3.5 * profile.aggression;
            drift = 0.7 * drift + noise(rng, 0.8 * profile.aggression);
            let mut a = if hard_brake > 0 {
                hard_brake -= 1;
                -hard_decel
            } else {
                (0.2 * (target - speed) / 3.6 + drift).clamp(-b_max, a_max)
            };
            let next = (speed + a * 3.6 * dt).clamp(0.0, 200.0);
            a = (next - speed) / 3.6 / dt;
            speed = next;
            accel = a;
            gear = gear_for(speed, gear);
            let stopped = speed < 0.5 && target == 0.0;
            s.gear = if stopped { "N" } else { GEAR_NAMES[gear] };
            s.hill_hold = on(stopped && profile.hill_hold);

            cruise = if profile.uses_cruise && highway {
                if a < -1.0 {
                    "Standby"
                } else if (speed - target).abs() < 8.0 {
                    "Active"
                } else {
                    cruise
                }
            } else {
                "Off"
            };
        }
        s.cruise_control = cruise;

        // heading: occasional low-speed turns, gentle curvature otherwise
        if turn_left == 0 {
            if !parked && speed > 5.0 && speed < 40.0 && rng.gen_bool(0.03) {
                turn_left = rng.gen_range(3..7);
                yaw_target = rng.gen_range(10.0..22.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                signal_left = turn_left + 2;
                signal_state = if yaw_target > 0.0 { "Left" } else { "Right" };
            } else {
                yaw_target = if parked { 0.0 } else { noise(rng, 2.0) };
            }
        } else {
            turn_left -= 1;
        }
        yaw = 0.6 * yaw + 0.4 * yaw_target;
        if speed < 1.0 {
            yaw = 0.0;
        }
        if highway && signal_left == 0 && rng.gen_bool(0.01) {
            signal_left = rng.gen_range(3..6);
            signal_state = if rng.gen_bool(0.5) { "Left" } else { "Right" };
        }
        s.turn_signal = if signal_left > 0 {
            signal_left -= 1;
            signal_state
        } else {
            "Off"
        };

        let v_ms = speed / 3.6;
        let moving = if parked { 0.3 } else { 1.0 };
        s.speed = speed;
        s.accel_longitudinal = accel + noise(rng, ACCEL_NOISE * moving);
        let lateral = v_ms * yaw.to_radians();
        s.accel_lateral = lateral + noise(rng, ACCEL_NOISE * moving);
        s.yaw_rate = yaw + noise(rng, YAW_NOISE * moving);
        s.steering_angle = 15.0 * 2.7 * yaw / v_ms.max(3.0) + noise(rng, STEERING_NOISE * moving);

        let throttle = if parked || accel < -0.2 {
            0.0
        } else {
            (6.0 + accel.max(0.0) * 10.0 / profile.aggression + speed * 0.1 + noise(rng, 1.5)).clamp(0.0, 100.0)
        };
        // pedal positions respond with some lag
        let throttle = 0.5 * prev_throttle + 0.5 * throttle;
        prev_throttle = throttle;
        s.throttle_position = throttle;
        let brake = if accel < -0.3 {
            -accel * 11.0 + noise(rng, 1.0)
        } else if !parked && speed < 0.5 {
            15.0 + noise(rng, 0.5)
        } else {
            0.0
        };
        let brake = 0.5 * prev_brake + 0.5 * brake.clamp(0.0, 200.0);
        prev_brake = brake;
        s.brake_pressure = brake;
        s.brake_switch = on(s.brake_pressure > 2.0);
        s.engine_rpm = if s.ignition == "Acc" {
            0.0
        } else if parked || s.gear == "N" {
            profile.idle_rpm + noise(rng, 15.0)
        } else {
            (speed * RPM_PER_KMH[gear] + throttle * 4.0).max(profile.idle_rpm) + noise(rng, 25.0)
        };

        let decel = -accel;
        s.abs_active = on(decel > 6.0);
        s.emergency_brake_assist = on(decel > 7.0);
        s.collision_warning = on((decel > 5.0 && rng.gen_bool(0.3)) || (speed > 20.0 && rng.gen_bool(0.0004)));
        s.esc_active = on(lateral.abs() > 4.0);
        s.tcs_active = on(accel > 2.0 && speed < 40.0 && rng.gen_bool(0.1 + 0.2 * rain as f64));
        if ldw_left == 0 && speed > 60.0 && rng.gen_bool(0.0008) {
            ldw_left = rng.gen_range(1..3);
        }
        s.lane_departure_warning = on(ldw_left > 0);
        ldw_left = ldw_left.saturating_sub(1);
        s.seatbelt_driver = if parked && t < 3 { "Unbuckled" } else { "Buckled" };
        s.seatbelt_passenger = if occupants >= 2 && !(parked && t < 3) {
            "Buckled"
        } else {
            "Unbuckled"
        };
        s.window_driver = open(window_open && speed < 60.0);

        fuel -= (0.0004 + throttle * 0.00003) * dt;
        s.fuel_level = (fuel + noise(rng, 0.04)).clamp(0.0, 100.0);
        s.low_fuel_warning = on(fuel < 12.0);
        coolant += (coolant_target - coolant) * 0.01 * dt + noise(rng, 0.05);
        s.coolant_temp = coolant + noise(rng, 0.2);
        out.push(s);
    }
    out
}

/// State of a fallback generator for a feature the simulator does not know.
enum Fallback {
    Walk { lo: f64, hi: f64, x: f64 },
    Sticky { states: usize, current: u16 },
    None,
}

impl Fallback {
    fn new(f: &FeatureSpec, rng: &mut ChaCha8Rng) -> Self {
        match &f.kind {
            FeatureKind::Continuous {
                static_min,
                static_max,
                ..
            } => {
                let (lo, hi) = (*static_min, *static_max);
                Fallback::Walk {
                    lo,
                    hi,
                    x: lo + (hi - lo) * rng.gen_range(0.3..0.7),
                }
            }
            FeatureKind::Enumerated { states } => Fallback::Sticky {
                states: states.len(),
                current: rng.gen_range(0..states.len()) as u16,
            },
            FeatureKind::SymbolicIdentifier { .. } => Fallback::None,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> RawValue {
        match self {
            Fallback::Walk { lo, hi, x } => {
                let span = *hi - *lo;
                let mid = *lo + span / 2.0;
                *x += 0.05 * (mid - *x) + Normal::new(0.0, span * 0.01).expect("positive").sample(rng);
                *x = x.clamp(*lo, *hi);
                RawValue::Number(*x)
            }
            Fallback::Sticky { states, current } => {
                if rng.gen_bool(0.01) {
                    *current = rng.gen_range(0..*states) as u16;
                }
                RawValue::State(*current)
            }
            Fallback::None => RawValue::Missing,
        }
    }
}

fn corrupt(f: &FeatureSpec, value: RawValue, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> RawValue {
    let u: f64 = rng.gen();
    if u < cfg.missing_rate {
        RawValue::Missing
    } else if u < cfg.missing_rate + cfg.error_rate {
        match &f.kind {
            FeatureKind::Continuous { invalid_values, .. } if !invalid_values.is_empty() => {
                RawValue::Number(invalid_values[0])
            }
            _ => RawValue::Error,
        }
    } else if u < cfg.missing_rate + cfg.error_rate + cfg.outlier_rate {
        match &f.kind {
            FeatureKind::Continuous { static_max, static_min, .. } => {
                RawValue::Number(static_max + (static_max - static_min) * rng.gen_range(0.1..1.0))
            }
            FeatureKind::Enumerated { states } => RawValue::State(states.len() as u16),
            FeatureKind::SymbolicIdentifier { .. } => value,
        }
    } else {
        value
    }
}

fn build_trip(
    schema: &SignalSchema,
    cfg: &GeneratorConfig,
    profile: &VehicleProfile,
    vehicle: &Arc<str>,
    trip: usize,
    rng: &mut ChaCha8Rng,
) -> TripLog {
    let rate = schema.frame_rate_hz();
    let dt = 1.0 / rate;
    let frames = ((cfg.trip_length_s as f64) * rate).round() as usize;
    let signals = simulate_trip(profile, frames, dt, rng);
    let mut fallbacks: Vec<Fallback> = schema.features().iter().map(|f| Fallback::new(f, rng)).collect();
    let trip_id = trip_id(trip);
    let start = trip as f64 * 86_400.0;

    let frames = signals
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let values = schema
                .features()
                .iter()
                .zip(fallbacks.iter_mut())
                .map(|(f, fb)| {
                    let v = match &f.kind {
                        FeatureKind::SymbolicIdentifier { .. } => return RawValue::Missing,
                        FeatureKind::Continuous { .. } => {
                            s.continuous(&f.name).map(RawValue::Number)
                        }
                        FeatureKind::Enumerated { .. } => s.state(&f.name).map(|name| {
                            f.state_index(name)
                                .map(|i| RawValue::State(i as u16))
                                .unwrap_or(RawValue::State(0))
                        }),
                    };
                    let v = v.unwrap_or_else(|| fb.step(rng));
                    let v = match (v, f.static_range()) {
                        (RawValue::Number(x), Some((lo, hi))) => RawValue::Number(x.clamp(lo, hi)),
                        _ => v,
                    };
                    corrupt(f, v, cfg, rng)
                })
                .collect();
            DecodedFrame {
                timestamp: start + i as f64 * dt,
                vehicle_id: vehicle.clone(),
                trip_id: trip_id.clone(),
                values,
            }
        })
        .collect();
    TripLog {
        vehicle_id: vehicle.clone(),
        trip_id,
        frames,
    }
}

/// Generates `vehicles × trips_per_vehicle` trips ordered by vehicle then
/// trip. Deterministic in `(schema, config, seed)`.
pub fn generate_corpus(
    schema: &SignalSchema,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<TripLog>, DatagenError> {
    if cfg.vehicles == 0 || cfg.trips_per_vehicle == 0 || cfg.trip_length_s == 0 {
        return Err(DatagenError::InvalidConfig("counts must be positive".into()));
    }
    if (cfg.trip_length_s as f64 * schema.frame_rate_hz()).round() < 2.0 {
        return Err(DatagenError::InvalidConfig("trips need at least two frames".into()));
    }
    let rates = [cfg.missing_rate, cfg.error_rate, cfg.outlier_rate];
    if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || rates.iter().sum::<f64>() > 1.0 {
        return Err(DatagenError::InvalidConfig("corruption rates must be probabilities".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.vehicles)
        .flat_map(|v| (0..cfg.trips_per_vehicle).map(move |t| (v, t)))
        .collect();
    let profiles: Vec<VehicleProfile> = (0..cfg.vehicles)
        .map(|v| VehicleProfile::draw(&mut rng::stream(seed, &[rng::label("vehicle"), v as u64])))
        .collect();
    let ids: Vec<Arc<str>> = (0..cfg.vehicles).map(vehicle_id).collect();
    Ok(jobs
        .par_iter()
        .map(|&(v, t)| {
            let mut rng = rng::stream(seed, &[rng::label("trip"), v as u64, t as u64]);
            build_trip(schema, cfg, &profiles[v], &ids[v], t, &mut rng)
        })
        .collect())
}

struct CollisionSlots {
    accel_longitudinal: usize,
    accel_lateral: usize,
    rest: Vec<(&'static str, Option<usize>)>,
}

impl CollisionSlots {
    fn new(schema: &SignalSchema) -> Result<Self, DatagenError> {
        let need = |name: &'static str| schema.index_of(name).ok_or(DatagenError::MissingFeature(name));
        Ok(CollisionSlots {
            accel_longitudinal: need("accel_longitudinal")?,
            accel_lateral: need("accel_lateral")?,
            rest: [
                "speed",
                "yaw_rate",
                "throttle_position",
                "brake_pressure",
                "brake_switch",
                "airbag_deployed",
                "collision_warning",
                "turn_signal",
            ]
            .into_iter()
            .map(|n| (n, schema.index_of(n)))
            .collect(),
        })
    }

    fn get(&self, name: &str) -> Option<usize> {
        self.rest.iter().find(|(n, _)| *n == name).and_then(|(_, i)| *i)
    }
}

fn set_state(schema: &SignalSchema, frame: &mut DecodedFrame, slot: Option<usize>, state: &str) {
    if let Some(i) = slot {
        if let Some(s) = schema.features()[i].state_index(state) {
            frame.values[i] = RawValue::State(s as u16);
        }
    }
}

fn set_number(frame: &mut DecodedFrame, slot: Option<usize>, x: f64) {
    if let Some(i) = slot {
        frame.values[i] = RawValue::Number(x);
    }
}

/// Writes a collision signature into `window` (a slice of whole frames):
/// an acceleration pulse pointing away from the impact point, a matching
/// speed change, a yaw kick for off-axis hits, and post-crash braking and
/// safety flags until the end of the window.
fn apply_collision(
    schema: &SignalSchema,
    slots: &CollisionSlots,
    window: &mut [DecodedFrame],
    impact: Impact,
    cfg: &CollisionConfig,
    rng: &mut ChaCha8Rng,
) {
    let n = window.len();
    let k = if n >= 4 { rng.gen_range(1..n - 2) } else { 0 };
    let dv = rng.gen_range(cfg.delta_v.0..=cfg.delta_v.1);
    let jitter = if cfg.angle_jitter_deg > 0.0 {
        Normal::new(0.0, cfg.angle_jitter_deg).expect("positive").sample(rng)
    } else {
        0.0
    };
    let theta = (impact.angle_deg() + jitter).to_radians();
    // body frame: x forward, y left; the pulse points away from the impact
    let ax = -dv * theta.cos();
    let ay = dv * theta.sin();
    let speed_slot = slots.get("speed");
    let speed_before = speed_slot
        .and_then(|i| window[k].values[i].as_number())
        .unwrap_or(30.0);
    let mut speed = (speed_before + ax * 3.6).clamp(0.0, 200.0);
    let deploy = dv > 13.0 && rng.gen_bool(0.8);
    let warned = rng.gen_bool(0.4);
    if warned && k > 0 {
        set_state(schema, &mut window[k - 1], slots.get("collision_warning"), "On");
    }
    let yaw_kick = -theta.sin() * dv * rng.gen_range(2.0..5.0) * (2.0 * theta).sin().abs().max(0.3);

    for (j, frame) in window.iter_mut().enumerate().skip(k) {
        let after = j - k;
        if after == 0 {
            frame.values[slots.accel_longitudinal] = RawValue::Number(ax + rng.gen_range(-0.3..0.3));
            frame.values[slots.accel_lateral] = RawValue::Number(ay + rng.gen_range(-0.3..0.3));
            set_number(frame, slots.get("yaw_rate"), yaw_kick);
            set_state(schema, frame, slots.get("collision_warning"), "On");
        } else {
            let decel = if speed > 0.0 { rng.gen_range(2.5..5.0) } else { 0.0 };
            let next = (speed - decel * 3.6).max(0.0);
            let a = (next - speed) / 3.6;
            speed = next;
            frame.values[slots.accel_longitudinal] = RawValue::Number(a + rng.gen_range(-0.2..0.2));
            frame.values[slots.accel_lateral] = RawValue::Number(rng.gen_range(-0.5..0.5));
            set_number(frame, slots.get("yaw_rate"), yaw_kick * 0.3f64.powi(after as i32));
            set_number(frame, slots.get("brake_pressure"), 40.0 + rng.gen_range(-5.0..5.0));
            set_number(frame, slots.get("throttle_position"), 0.0);
            set_state(schema, frame, slots.get("brake_switch"), "On");
            if after >= 2 {
                set_state(schema, frame, slots.get("turn_signal"), "Hazard");
            }
        }
        set_number(frame, speed_slot, speed);
        if deploy {
            set_state(schema, frame, slots.get("airbag_deployed"), "On");
        }
    }
}

/// Labels every whole window of every trip and turns exactly
/// `round(rate × windows)` of them, chosen uniformly, into collisions.
/// Labels come back in corpus order.
pub fn inject_collisions(
    schema: &SignalSchema,
    mut corpus: Vec<TripLog>,
    cfg: &CollisionConfig,
    seed: u64,
) -> Result<(Vec<TripLog>, Vec<EventLabel>), DatagenError> {
    if !(0.0..1.0).contains(&cfg.rate) {
        return Err(DatagenError::InvalidConfig(format!("collision rate {} outside [0, 1)", cfg.rate)));
    }
    if !(cfg.delta_v.0 > 0.0 && cfg.delta_v.0 <= cfg.delta_v.1) {
        return Err(DatagenError::InvalidConfig("delta_v range must be positive and ordered".into()));
    }
    let slots = CollisionSlots::new(schema)?;
    let weights = WeightedIndex::new(cfg.impact_weights)
        .map_err(|e| DatagenError::InvalidConfig(format!("impact weights: {e}")))?;
    let fpw = schema.frames_per_window();

    let mut labels: Vec<EventLabel> = corpus
        .iter()
        .flat_map(|t| {
            (0..t.window_count(fpw)).map(move |w| EventLabel {
                vehicle_id: t.vehicle_id.clone(),
                trip_id: t.trip_id.clone(),
                window: w,
                impact: None,
            })
        })
        .collect();
    let count = (cfg.rate * labels.len() as f64).round() as usize;
    let mut rng = rng::stream(seed, &[rng::label("collisions")]);
    let mut chosen = index::sample(&mut rng, labels.len(), count).into_vec();
    chosen.sort_unstable();

    let mut trip_start = Vec::with_capacity(corpus.len());
    let mut acc = 0;
    for t in &corpus {
        trip_start.push(acc);
        acc += t.window_count(fpw);
    }
    for (n, &li) in chosen.iter().enumerate() {
        let impact = Impact::ALL[weights.sample(&mut rng)];
        let trip = trip_start.partition_point(|&s| s <= li) - 1;
        let w = labels[li].window;
        let mut wrng = rng::stream(seed, &[rng::label("impact"), n as u64]);
        let frames = &mut corpus[trip].frames[w * fpw..(w + 1) * fpw];
        apply_collision(schema, &slots, frames, impact, cfg, &mut wrng);
        labels[li].impact = Some(impact);
    }
    Ok((corpus, labels))
}

/// Keeps every positive and `round(ratio × positives)` negatives drawn
/// uniformly without replacement; for a given seed the negatives kept at a
/// lower ratio are a subset of those kept at a higher one. Returns
/// ascending indices into `labels`.
pub fn rebalance(labels: &[EventLabel], ratio: f64, seed: u64) -> Result<Vec<usize>, DatagenError> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i].is_collision());
    if pos.is_empty() || neg.is_empty() {
        return Err(DatagenError::SingleClass);
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(DatagenError::InvalidConfig(format!("ratio {ratio} must be positive")));
    }
    let want = (ratio * pos.len() as f64).round() as usize;
    if want > neg.len() {
        return Err(DatagenError::Unattainable {
            requested: ratio,
            achievable: neg.len() as f64 / pos.len() as f64,
        });
    }
    // a fixed shuffle makes the kept negatives nested across ratios
    let mut neg = neg;
    neg.shuffle(&mut rng::stream(seed, &[rng::label("rebalance")]));
    neg.truncate(want);
    let mut keep: Vec<usize> = neg.into_iter().chain(pos).collect();
    keep.sort_unstable();
    Ok(keep)
}

pub fn write_labels<W: Write>(labels: &[EventLabel], out: W) -> Result<(), DatagenError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["vehicle_id", "trip_id", "window", "label", "impact"])?;
    for l in labels {
        w.write_record([
            &*l.vehicle_id,
            &*l.trip_id,
            &l.window.to_string(),
            if l.is_collision() { "1" } else { "0" },
            l.impact.map_or("", Impact::name),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_labels<R: Read>(input: R) -> Result<Vec<EventLabel>, DatagenError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    let mut last: Option<(Arc<str>, Arc<str>)> = None;
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: &str| DatagenError::BadLabel {
            line,
            reason: reason.to_string(),
        };
        if rec.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let window = rec[2].parse().map_err(|_| bad("bad window index"))?;
        let impact = match (&rec[3], &rec[4]) {
            ("0", "") => None,
            ("1", name) => Some(Impact::from_name(name).ok_or_else(|| bad("unknown impact class"))?),
            _ => return Err(bad("label and impact disagree")),
        };
        let (v, t) = match &last {
            Some((v, t)) if **v == rec[0] && **t == rec[1] => (v.clone(), t.clone()),
            _ => (Arc::from(&rec[0]), Arc::from(&rec[1])),
        };
        last = Some((v.clone(), t.clone()));
        out.push(EventLabel {
            vehicle_id: v,
            trip_id: t,
            window,
            impact,
        });
    }
    Ok(out)
}
