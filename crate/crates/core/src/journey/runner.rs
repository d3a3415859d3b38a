//! Journey execution: drives the browser step by step with the capture
//! proxy recording flows, one [`JourneyRun`] per repetition.

use serde_json::json;
use tokio::time::{Duration, Instant};

use crate::flow::JourneyRun;
use crate::proxy::{start_proxy, stop_proxy, NetworkActivity, ProxyConfig, SharedStore};

use super::webdriver::WebDriverClient;
use super::{JourneyError, JourneySpec, Step};

#[derive(Debug, Clone)]
pub struct JourneyOptions {
    /// Tell the browser to accept certificates it cannot verify; an
    /// alternative to installing the capture CA into the browser profile.
    pub accept_insecure_certs: bool,
}

impl Default for JourneyOptions {
    fn default() -> Self {
        Self {
            accept_insecure_certs: false,
        }
    }
}

/// Result of a network-idle wait.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdleWait {
    pub elapsed: Duration,
    /// Set when the hard timeout fired before the network went quiet.
    pub timed_out: bool,
}

/// Waits until no new flow has started for `quiet_period`, or until
/// `hard_timeout` elapses (a normal return, flagged).
pub async fn wait_network_idle(
    activity: &dyn NetworkActivity,
    quiet_period: Duration,
    hard_timeout: Duration,
) -> IdleWait {
    let started = Instant::now();
    let poll = Duration::from_millis(25).min(quiet_period.max(Duration::from_millis(1)));
    loop {
        let now = Instant::now();
        let last = activity.last_flow_started().unwrap_or(started);
        if now.duration_since(last.max(started)) >= quiet_period {
            return IdleWait {
                elapsed: now - started,
                timed_out: false,
            };
        }
        if now - started >= hard_timeout {
            return IdleWait {
                elapsed: now - started,
                timed_out: true,
            };
        }
        tokio::time::sleep(poll).await;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScrollOutcome {
    pub commands_issued: u32,
    pub elapsed: Duration,
}

/// Issues scroll commands at `interval` until `duration` elapses (or
/// `fixed_steps` commands were sent). The measured elapsed time is what
/// analytics divide by, not the nominal duration.
pub async fn scroll_feed(
    driver: &WebDriverClient,
    duration: Option<Duration>,
    fixed_steps: Option<u32>,
    interval: Duration,
    step_px: u32,
) -> Result<ScrollOutcome, JourneyError> {
    let started = Instant::now();
    let deadline = duration.map(|d| started + d);
    let mut issued = 0u32;
    loop {
        if let Some(deadline) = deadline {
            if Instant::now() >= deadline {
                break;
            }
        }
        if let Some(limit) = fixed_steps {
            if issued >= limit {
                break;
            }
        }
        driver
            .execute_script("window.scrollBy(0, arguments[0]);", json!([step_px]))
            .await?;
        issued += 1;
        match deadline {
            Some(deadline) => {
                let next = Instant::now() + interval;
                tokio::time::sleep_until(next.min(deadline)).await;
            }
            None => tokio::time::sleep(interval).await,
        }
    }
    Ok(ScrollOutcome {
        commands_issued: issued,
        elapsed: started.elapsed(),
    })
}

/// Executes the steps of a journey within an existing driver session.
pub(super) async fn execute_steps(
    driver: &WebDriverClient,
    spec: &JourneySpec,
    activity: Option<&dyn NetworkActivity>,
) -> Result<(), JourneyError> {
    for (step_index, step) in spec.steps.iter().enumerate() {
        let fail = |source| JourneyError::Step {
            step_index,
            step: step.kind().to_string(),
            source,
        };
        match step {
            Step::Goto(url) => driver.navigate(url).await.map_err(fail)?,
            Step::Click(target) => {
                let element = driver.find_element(target).await.map_err(fail)?;
                driver.click(&element).await.map_err(fail)?;
            }
            Step::TypeText {
                target,
                text,
                per_key_delay,
            } => {
                let element = driver.find_element(target).await.map_err(fail)?;
                driver.click(&element).await.map_err(fail)?;
                driver
                    .type_sequentially(text, per_key_delay.0)
                    .await
                    .map_err(fail)?;
            }
            Step::Scroll {
                duration,
                steps,
                interval,
                step_px,
            } => {
                scroll_feed(
                    driver,
                    duration.map(|d| d.as_duration()),
                    *steps,
                    interval.as_duration(),
                    *step_px,
                )
                .await?;
            }
            Step::WaitFixed(duration) => tokio::time::sleep(duration.as_duration()).await,
            Step::WaitNetworkIdle { quiet, timeout } => match activity {
                Some(activity) => {
                    wait_network_idle(activity, quiet.as_duration(), timeout.as_duration()).await;
                }
                // Without a capture session there is no flow signal; the
                // quiet period alone is the best available wait.
                None => tokio::time::sleep(quiet.as_duration()).await,
            },
            Step::AssertVisible(target) => {
                let element = driver.find_element(target).await.map_err(fail)?;
                let visible = driver.is_displayed(&element).await.map_err(fail)?;
                if !visible {
                    return Err(fail(super::DriverError::Protocol {
                        error: "element not visible".to_string(),
                        message: target.to_string(),
                    }));
                }
            }
        }
    }
    Ok(())
}

/// Runs a journey `spec.repeat` times against a WebDriver endpoint with
/// the capture proxy recording each repetition into its own run.
///
/// A step failure commits the partial run flagged incomplete and aborts
/// the remaining repetitions, returning the error alongside the runs
/// completed so far via `Err`; callers inspect the store for partials.
pub async fn run_journey(
    spec: &JourneySpec,
    driver_endpoint: &str,
    proxy_config: ProxyConfig,
    store: SharedStore,
    options: &JourneyOptions,
) -> Result<Vec<JourneyRun>, JourneyError> {
    spec.validate()?;
    let mut runs = Vec::with_capacity(spec.repeat as usize);
    for _repetition in 0..spec.repeat {
        let config = proxy_config
            .clone()
            .with_labels(&spec.platform_id, &spec.name);
        let session = start_proxy(config, store.clone()).await?;
        let proxy_address = session.local_addr().to_string();

        let mut driver = WebDriverClient::new(driver_endpoint);
        let session_result = async {
            driver
                .new_session(Some(&proxy_address), options.accept_insecure_certs)
                .await?;
            Ok::<(), JourneyError>(())
        }
        .await;
        if let Err(e) = session_result {
            let _ = stop_proxy(session).await;
            return Err(e);
        }

        let steps_result = execute_steps(&driver, spec, Some(&session)).await;
        // Close the browser session regardless of step outcome.
        let _ = driver.delete_session().await;

        if steps_result.is_err() {
            // Commit what was captured as a partial run, flagged.
            session.mark_incomplete();
        }
        let summary = stop_proxy(session).await?;
        steps_result?;
        runs.push(summary.run);
    }
    Ok(runs)
}
